"""Image-text pair generation from image embeddings and a noun vocabulary.

Pipeline: k-means centers over the image embeddings, the ``k1`` nearest
nouns of every center form a candidate subset, and every image gets a
synthetic text feature built from its ``k2`` nearest candidates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_store import EmbeddingMatrix, normalize_rows, read_embeddings, write_embeddings
from .errors import ConfigError, DegenerateDataError, DimMismatchError


@dataclass
class PairGenConfig:
    K: int = 10
    k1: int = 200
    k2: int = 50
    text_temp: float = 0.01
    kmeans_restarts: int = 10
    kmeans_max_iter: int = 300
    seed: int = 0

    def validate(self):
        if self.K < 1 or self.k1 < 1 or self.k2 < 1:
            raise ConfigError("K, k1 and k2 must be >= 1")
        if not self.text_temp > 0:
            raise ConfigError(f"text_temp must be positive, got {self.text_temp}")


@dataclass
class NounVocabulary:
    nouns: list[str]
    embeddings: EmbeddingMatrix

    def __post_init__(self):
        if not isinstance(self.embeddings, EmbeddingMatrix):
            self.embeddings = EmbeddingMatrix.from_array(np.asarray(self.embeddings), ids=list(self.nouns))
        if len(self.nouns) != self.embeddings.n:
            raise DimMismatchError(f"{len(self.nouns)} nouns but {self.embeddings.n} embedding rows")
        if len(set(self.nouns)) != len(self.nouns):
            raise ValueError("noun vocabulary contains duplicates")
        if not self.embeddings.normalized:
            self.embeddings = normalize_rows(self.embeddings)

    def __len__(self):
        return len(self.nouns)


@dataclass
class PairSet:
    image: EmbeddingMatrix
    text: EmbeddingMatrix
    candidate_indices: list[int]

    def __post_init__(self):
        if self.image.n != self.text.n or self.image.ids != self.text.ids:
            raise DimMismatchError("image and text matrices must have equal N and aligned ids")


def read_nouns(path) -> list[str]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip()]


def load_vocabulary(noun_path, embedding_path) -> NounVocabulary:
    nouns = read_nouns(noun_path)
    emb = read_embeddings(embedding_path)
    if emb.ids != nouns:
        # tolerate index-style ids, but order must match the noun list
        emb = EmbeddingMatrix(emb.data, nouns, emb.normalized)
    return NounVocabulary(nouns, emb)


def _topk_stable(scores: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the ``k`` largest entries per row; ties go to the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _kmeanspp(x, K, rng):
    n = x.shape[0]
    centers = np.empty((K, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            raise DegenerateDataError("k-means++ ran out of distinct points")
        idx = rng.choice(n, p=d2 / total)
        centers[k] = x[idx]
        d2 = np.minimum(d2, ((x - centers[k]) ** 2).sum(1))
    return centers


def _lloyd(x, centers, max_iter, tol):
    x_sq = (x**2).sum(1)
    prev = np.inf
    for _ in range(max_iter):
        d2 = x_sq[:, None] - 2 * x @ centers.T + (centers**2).sum(1)[None, :]
        labels = d2.argmin(1)
        inertia = np.maximum(d2[np.arange(len(x)), labels], 0).sum()
        for k in range(centers.shape[0]):
            members = labels == k
            if members.any():
                centers[k] = x[members].mean(0)
            else:
                # empty cluster: reseed at the worst-fit point
                far = d2[np.arange(len(x)), labels].argmax()
                centers[k] = x[far]
        if prev - inertia <= tol * max(inertia, 1e-300):
            break
        prev = inertia
    d2 = x_sq[:, None] - 2 * x @ centers.T + (centers**2).sum(1)[None, :]
    labels = d2.argmin(1)
    inertia = np.maximum(d2[np.arange(len(x)), labels], 0).sum()
    return centers, labels, inertia


def kmeans(x, K: int, seed: int = 0, restarts: int = 10, max_iter: int = 300, tol: float = 1e-4):
    """Lloyd k-means with k-means++ seeding; best inertia over ``restarts``.

    Returns ``(centers, labels, inertia)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < K:
        raise DegenerateDataError(f"need at least K={K} rows, got {x.shape[0]}")
    if np.unique(x, axis=0).shape[0] < K:
        raise DegenerateDataError(f"fewer than K={K} distinct rows")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        result = _lloyd(x, _kmeanspp(x, K, rng), max_iter, tol)
        if best is None or result[2] < best[2]:
            best = result
    return best


def kmeans_centers(V: EmbeddingMatrix, K: int, seed: int = 0, restarts: int = 10, max_iter: int = 300) -> np.ndarray:
    return kmeans(V.data, K, seed=seed, restarts=restarts, max_iter=max_iter)[0]


def select_candidate_nouns(centers, vocab: NounVocabulary, k1: int) -> list[int]:
    """Sorted union over centers of each center's ``k1`` highest-cosine nouns."""
    if k1 > len(vocab):
        raise ConfigError(f"k1={k1} exceeds vocabulary size {len(vocab)}")
    c = np.asarray(centers, dtype=np.float64)
    c = c / np.linalg.norm(c, axis=1, keepdims=True)
    sims = c @ vocab.embeddings.data.astype(np.float64).T
    return sorted(set(_topk_stable(sims, k1).ravel().tolist()))


def text_weights(V, candidates, k2: int, text_temp: float, chunk: int = 4096):
    """Sparse weights as ``(indices, weights)``, both shaped ``(N, k2)``.

    Weights are a softmax over the retained similarities scaled by
    ``1/text_temp``; every row sums to one.
    """
    v = np.asarray(V, dtype=np.float64)
    n_bar = np.asarray(candidates, dtype=np.float64)
    if k2 > n_bar.shape[0]:
        raise ConfigError(f"k2={k2} exceeds candidate count {n_bar.shape[0]}")
    idx_out = np.empty((v.shape[0], k2), dtype=np.int64)
    w_out = np.empty((v.shape[0], k2))
    for s in range(0, v.shape[0], chunk):
        sims = v[s : s + chunk] @ n_bar.T
        idx = _topk_stable(sims, k2)
        top = np.take_along_axis(sims, idx, axis=1) / text_temp
        top -= top.max(1, keepdims=True)
        w = np.exp(top)
        idx_out[s : s + chunk] = idx
        w_out[s : s + chunk] = w / w.sum(1, keepdims=True)
    return idx_out, w_out


def build_text_features(V: EmbeddingMatrix, candidates: EmbeddingMatrix, k2: int, text_temp: float = 0.01) -> EmbeddingMatrix:
    n_bar = candidates.data.astype(np.float64)
    idx, w = text_weights(V.data, n_bar, k2, text_temp)
    t = np.einsum("nk,nkd->nd", w, n_bar[idx])
    return normalize_rows(EmbeddingMatrix(t, list(V.ids)))


def generate_pairs(V: EmbeddingMatrix, vocab: NounVocabulary, config: PairGenConfig) -> PairSet:
    config.validate()
    if not V.normalized:
        V = normalize_rows(V)
    centers = kmeans_centers(V, config.K, seed=config.seed, restarts=config.kmeans_restarts, max_iter=config.kmeans_max_iter)
    cand = select_candidate_nouns(centers, vocab, config.k1)
    if config.k2 > len(cand):
        raise ConfigError(f"k2={config.k2} exceeds the candidate subset size {len(cand)}; lower k2 or raise k1")
    cand_emb = vocab.embeddings.take(cand)
    T = build_text_features(V, cand_emb, config.k2, config.text_temp)
    return PairSet(V, T, cand)


def save_pairs(pairs: PairSet, out_dir, vocab: NounVocabulary | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"image": out / "pairs_image.emb", "text": out / "pairs_text.emb", "candidates": out / "candidates.json"}
    write_embeddings(pairs.image, paths["image"])
    write_embeddings(pairs.text, paths["text"])
    sidecar = {"candidate_indices": pairs.candidate_indices}
    if vocab is not None:
        sidecar["candidate_nouns"] = [vocab.nouns[i] for i in pairs.candidate_indices]
    paths["candidates"].write_text(json.dumps(sidecar, indent=1), encoding="utf-8")
    return paths


def load_pairs(out_dir) -> PairSet:
    out = Path(out_dir)
    sidecar = json.loads((out / "candidates.json").read_text(encoding="utf-8"))
    return PairSet(
        read_embeddings(out / "pairs_image.emb"),
        read_embeddings(out / "pairs_text.emb"),
        list(sidecar["candidate_indices"]),
    )
