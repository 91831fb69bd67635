import math

import numpy as np
import pytest
from sklearn.cluster import KMeans

from seic.embedding_store import EmbeddingMatrix, normalize_rows
from seic.errors import ConfigError, DegenerateDataError
from seic.pairgen import (
    NounVocabulary,
    PairGenConfig,
    build_text_features,
    generate_pairs,
    kmeans_centers,
    load_pairs,
    save_pairs,
    select_candidate_nouns,
    text_weights,
)

from conftest import unit_rows


def brute_topk_union(centers, nouns, k1):
    chosen = set()
    for c in centers:
        c = c / np.linalg.norm(c)
        sims = [(float(c @ n), j) for j, n in enumerate(nouns)]
        sims.sort(key=lambda s: (-s[0], s[1]))
        chosen.update(j for _, j in sims[:k1])
    return sorted(chosen)


def vocab_from(rows):
    return NounVocabulary([f"n{i}" for i in range(len(rows))], normalize_rows(EmbeddingMatrix.from_array(rows)))


class TestKMeans:
    def test_separated_clouds_recover_means(self, rng):
        a = rng.normal(0, 0.05, (60, 3)) + [5, 0, 0]
        b = rng.normal(0, 0.05, (40, 3)) + [-5, 0, 0]
        centers = kmeans_centers(EmbeddingMatrix.from_array(np.vstack([a, b])), 2, seed=0)
        data = EmbeddingMatrix.from_array(np.vstack([a, b])).data.astype(np.float64)
        means = np.array([data[:60].mean(0), data[60:].mean(0)])
        order = np.argsort(centers[:, 0])[::-1]
        np.testing.assert_allclose(centers[order], means, atol=1e-6)

    def test_singleton_clusters(self, rng):
        pts = rng.standard_normal((4, 5))
        centers = kmeans_centers(EmbeddingMatrix.from_array(pts), 4, seed=3)
        pts32 = pts.astype(np.float32).astype(np.float64)
        matched = sorted(int(np.argmin(np.linalg.norm(pts32 - c, axis=1))) for c in centers)
        assert matched == [0, 1, 2, 3]
        np.testing.assert_allclose(np.sort(centers, axis=0), np.sort(pts32, axis=0), atol=1e-12)

    def test_deterministic(self, rng):
        V = EmbeddingMatrix.from_array(rng.standard_normal((200, 8)))
        assert np.array_equal(kmeans_centers(V, 5, seed=7), kmeans_centers(V, 5, seed=7))

    def test_too_few_distinct_rows(self):
        V = EmbeddingMatrix.from_array(np.array([[1.0, 0.0]] * 5 + [[0.0, 1.0]]))
        with pytest.raises(DegenerateDataError):
            kmeans_centers(V, 3)

    def test_inertia_close_to_sklearn(self, rng):
        x = unit_rows(rng, 500, 16)
        ours = kmeans_centers(EmbeddingMatrix.from_array(x), 6, seed=0)
        ref = KMeans(6, n_init=10, random_state=0).fit(x.astype(np.float32).astype(np.float64))

        def inertia(c):
            return ((x[:, None, :] - c[None]) ** 2).sum(-1).min(1).sum()

        assert inertia(ours) <= inertia(ref.cluster_centers_) * 1.02


class TestCandidateNouns:
    def test_self_nearest(self, rng):
        nouns = unit_rows(rng, 12, 6)
        vocab = vocab_from(nouns)
        centers = vocab.embeddings.data[[3, 7]]
        assert select_candidate_nouns(centers, vocab, 1) == [3, 7]

    def test_duplicate_centers_dedup(self, rng):
        vocab = vocab_from(unit_rows(rng, 30, 6))
        c = rng.standard_normal(6)
        assert len(select_candidate_nouns(np.stack([c, c]), vocab, 5)) == 5

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_full_sort(self, seed):
        r = np.random.default_rng(seed)
        vocab = vocab_from(unit_rows(r, 300, 10))
        centers = r.standard_normal((4, 10))
        got = select_candidate_nouns(centers, vocab, 10)
        assert got == brute_topk_union(centers, vocab.embeddings.data.astype(np.float64), 10)

    def test_ties_go_to_lower_index(self):
        rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
        vocab = NounVocabulary(["a", "b", "c", "d"], EmbeddingMatrix.from_array(rows, normalized=True))
        assert select_candidate_nouns(np.array([[1.0, 0.0]]), vocab, 2) == [0, 2]

    def test_k1_too_large(self, rng):
        with pytest.raises(ConfigError):
            select_candidate_nouns(np.ones((1, 4)), vocab_from(unit_rows(rng, 3, 4)), 4)


class TestTextFeatures:
    def test_single_neighbor_copies_noun(self, rng):
        cand = normalize_rows(EmbeddingMatrix.from_array(unit_rows(rng, 6, 5)))
        V = cand.take([3])
        out = build_text_features(V, cand, k2=1)
        np.testing.assert_allclose(out.data[0], cand.data[3], atol=1e-7)

    def test_two_candidate_softmax(self):
        # candidates with cosine 0.9 and 0.8 to v = e1
        n1 = np.array([0.9, math.sqrt(1 - 0.81), 0.0])
        n2 = np.array([0.8, 0.0, math.sqrt(1 - 0.64)])
        cand = EmbeddingMatrix.from_array(np.stack([n1, n2]), normalized=True)
        V = EmbeddingMatrix.from_array([[1.0, 0.0, 0.0]], normalized=True)
        idx, w = text_weights(V.data, cand.data, 2, 0.1)
        e = math.e
        np.testing.assert_allclose(w[0], [e / (e + 1), 1 / (e + 1)], atol=1e-6)
        assert idx[0].tolist() == [0, 1]
        t = w[0, 0] * cand.data[0].astype(np.float64) + w[0, 1] * cand.data[1].astype(np.float64)
        out = build_text_features(V, cand, k2=2, text_temp=0.1)
        np.testing.assert_allclose(out.data[0], t / np.linalg.norm(t), atol=1e-6)

    def test_huge_temperature_gives_mean(self, rng):
        cand = normalize_rows(EmbeddingMatrix.from_array(unit_rows(rng, 7, 4)))
        V = normalize_rows(EmbeddingMatrix.from_array(unit_rows(rng, 3, 4)))
        out = build_text_features(V, cand, k2=7, text_temp=1e6)
        mean = cand.data.astype(np.float64).mean(0)
        for row in out.data:
            np.testing.assert_allclose(row, mean / np.linalg.norm(mean), atol=1e-5)

    def test_weight_rows(self, rng):
        V = unit_rows(rng, 50, 8)
        cand = unit_rows(rng, 40, 8)
        idx, w = text_weights(V, cand, 6, 0.01)
        assert idx.shape == w.shape == (50, 6)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(1), 1.0, atol=1e-6)
        assert all(len(set(r)) == 6 for r in idx.tolist())

    def test_vocabulary_permutation(self, rng):
        nouns = unit_rows(rng, 200, 12)
        V = EmbeddingMatrix.from_array(unit_rows(rng, 30, 12), normalized=True)
        perm = rng.permutation(200)
        va, vb = vocab_from(nouns), vocab_from(nouns[perm])
        centers = rng.standard_normal((3, 12))
        ca = select_candidate_nouns(centers, va, 15)
        cb = select_candidate_nouns(centers, vb, 15)
        assert sorted(perm[cb].tolist()) == ca
        ta = build_text_features(V, va.embeddings.take(ca), 5)
        tb = build_text_features(V, vb.embeddings.take(cb), 5)
        np.testing.assert_allclose(ta.data, tb.data, atol=1e-6)


class TestGeneratePairs:
    def test_end_to_end_and_roundtrip(self, tmp_path, rng):
        V = normalize_rows(EmbeddingMatrix.from_array(unit_rows(rng, 80, 8)))
        vocab = vocab_from(unit_rows(rng, 60, 8))
        pairs = generate_pairs(V, vocab, PairGenConfig(K=3, k1=10, k2=4))
        assert pairs.text.ids == pairs.image.ids
        assert len(pairs.candidate_indices) <= 30
        save_pairs(pairs, tmp_path, vocab)
        back = load_pairs(tmp_path)
        assert np.array_equal(back.text.data, pairs.text.data)
        assert back.candidate_indices == pairs.candidate_indices

    def test_k2_exceeds_candidates(self, rng):
        V = normalize_rows(EmbeddingMatrix.from_array(unit_rows(rng, 20, 4)))
        vocab = vocab_from(unit_rows(rng, 10, 4))
        with pytest.raises(ConfigError):
            generate_pairs(V, vocab, PairGenConfig(K=2, k1=2, k2=5))
