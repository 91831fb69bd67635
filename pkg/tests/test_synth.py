import numpy as np
import pytest

from seic.errors import DegenerateDataError
from seic.synth import class_sizes, embedding_mixture, image_mixture


class TestClassSizes:
    def test_sum_and_ratio(self):
        s = class_sizes(2000, 2, 9.0)
        assert s.sum() == 2000 and s.tolist() == [1800, 200]

    def test_balanced(self):
        assert class_sizes(2000, 5).tolist() == [400] * 5

    def test_geometric_extremes(self):
        s = class_sizes(10000, 5, 9.0)
        assert s.sum() == 10000
        assert s[0] / s[-1] == pytest.approx(9.0, rel=0.01)
        assert np.all(np.diff(s) < 0)


class TestEmbeddingMixture:
    def test_geometry(self):
        m = embedding_mixture(N=500, D=32, K=4, separation_deg=60, seed=1)
        assert m.data.shape == (500, 32)
        assert np.allclose(np.linalg.norm(m.data, axis=1), 1)
        assert m.min_angle_deg >= 60
        assert np.bincount(m.labels).tolist() == [125] * 4

    def test_seeded(self):
        a, b = embedding_mixture(N=100, seed=3), embedding_mixture(N=100, seed=3)
        assert np.array_equal(a.data, b.data) and np.array_equal(a.labels, b.labels)

    def test_nouns(self):
        m = embedding_mixture(N=100, K=3, n_nouns_per_cluster=4, n_distractors=6)
        assert len(m.nouns) == len(set(m.nouns)) == 18 == m.noun_data.shape[0]
        assert m.nouns[0] == "concept0_0" and m.nouns[-1] == "distractor_5"

    def test_points_nearest_own_center(self):
        m = embedding_mixture(N=1000, seed=0)
        assert np.mean((m.data @ m.centers.T).argmax(1) == m.labels) > 0.99

    def test_impossible_separation(self):
        with pytest.raises(DegenerateDataError):
            embedding_mixture(N=50, D=2, K=6, separation_deg=80)


class TestImageMixture:
    def test_shapes(self):
        x, y = image_mixture(N=40, K=4, size=8, seed=0)
        assert x.shape == (40, 3, 8, 8) and x.dtype == np.float32
        assert set(y.tolist()) == {0, 1, 2, 3}

    def test_class_signal_is_flip_symmetric(self):
        x, y = image_mixture(N=400, K=2, size=8, clutter=0.0, noise=0.0, seed=0)
        assert np.allclose(x, x[..., ::-1], atol=1e-6)
        assert np.allclose(x[y == 0], x[y == 0][0], atol=1e-6)
