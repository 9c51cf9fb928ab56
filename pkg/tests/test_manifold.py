import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln
from scipy.stats import ortho_group

from ecoglc.errors import ContractError, DegenerateInputError
from ecoglc.manifold import (ess_calibration, ess_local_id, id_cs_correlation, knn, pca_embed_2d,
                             read_embedding_csv, svm_separability, twonn_id, write_embedding_csv)


@pytest.fixture(scope="module")
def cal(tmp_path_factory):
    import os
    os.environ["ECOGLC_CACHE_DIR"] = str(tmp_path_factory.mktemp("cache"))
    return ess_calibration(40)


def _quadratic_scan(X, k):
    n = len(X)
    idx = np.zeros((n, k), dtype=int)
    for i in range(n):
        d = [(float(np.sqrt(np.sum((X[i] - X[j]) ** 2))), j) for j in range(n) if j != i]
        d.sort()
        idx[i] = [j for _, j in d[:k]]
    return idx


def _mean_abs_sine_exact(d):
    return float(np.exp(2 * gammaln(d / 2) - gammaln((d - 1) / 2) - gammaln((d + 1) / 2)))


class TestKnn:
    def test_collinear(self):
        idx, dist = knn(np.array([[0.0], [1.0], [3.0]]), 1)
        assert idx[:, 0].tolist() == [1, 0, 1]
        np.testing.assert_allclose(dist[:, 0], [1, 1, 2])

    def test_duplicates(self):
        X = np.array([[0.0, 0], [0, 0], [5, 5]])
        idx, dist = knn(X, 1)
        assert idx[0, 0] == 1 and idx[1, 0] == 0
        assert dist[0, 0] == 0.0

    def test_tie_breaks_low_index(self):
        X = np.array([[0.0], [-1.0], [1.0]])
        idx, _ = knn(X, 2)
        assert idx[0].tolist() == [1, 2]

    def test_matches_scan_oracle(self):
        X = np.random.default_rng(0).normal(size=(200, 5))
        np.testing.assert_array_equal(knn(X, 4)[0], _quadratic_scan(X, 4))

    def test_k_too_large(self):
        with pytest.raises(ContractError):
            knn(np.zeros((3, 2)), 3)


class TestTwoNN:
    def test_square(self):
        X = np.random.default_rng(1).uniform(size=(2000, 2))
        assert 1.8 <= twonn_id(X) <= 2.2

    def test_line_in_10d(self):
        rng = np.random.default_rng(2)
        X = np.outer(rng.uniform(size=2000), rng.normal(size=10))
        assert 0.9 <= twonn_id(X) <= 1.1

    def test_gaussian_10d(self):
        X = np.random.default_rng(3).normal(size=(2000, 10))
        assert 8.5 <= twonn_id(X) <= 11.5

    def test_all_duplicates(self):
        with pytest.raises(DegenerateInputError):
            twonn_id(np.ones((30, 3)))

    def test_too_few_points(self):
        with pytest.raises(ContractError):
            twonn_id(np.random.default_rng(0).normal(size=(10, 2)))

    def test_isometry_invariance(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(500, 6))
        Q = ortho_group.rvs(6, random_state=5)
        assert abs(twonn_id(X @ Q + 3.0) - twonn_id(X)) < 1e-9


class TestEss:
    def test_calibration_analytic(self, cal):
        assert cal.values[0] == 0.0
        assert abs(cal.values[1] - 2 / np.pi) < 0.003
        for d in (3, 7, 20, 40):
            assert abs(cal.values[d - 1] - _mean_abs_sine_exact(d)) < 0.003
        assert np.all(np.diff(cal.values) > 0)
        assert cal.values[-1] > 0.98

    def test_calibration_cached(self, cal):
        again = ess_calibration(40)
        np.testing.assert_array_equal(again.values, cal.values)

    def test_inversion(self, cal):
        for d in (2, 5, 17):
            assert cal.invert(cal.values[d - 1]) == pytest.approx(d)

    def test_gaussian_5(self, cal):
        assert 4 <= ess_local_id(np.random.default_rng(0).normal(size=(2000, 5)), 100, cal) <= 6

    def test_gaussian_20(self, cal):
        assert 17 <= ess_local_id(np.random.default_rng(1).normal(size=(2000, 20)), 100, cal) <= 23

    def test_plane_in_50d(self, cal):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(2000, 2)) @ rng.normal(size=(2, 50))
        assert 1.7 <= ess_local_id(X, 100, cal) <= 2.4

    def test_monotone_in_dimension(self, cal):
        rng = np.random.default_rng(6)
        est = [ess_local_id(rng.normal(size=(600, d)), 60, cal) for d in (2, 5, 10, 20)]
        assert np.all(np.diff(est) > 0)

    def test_local_values(self, cal):
        est, local = ess_local_id(np.random.default_rng(0).normal(size=(300, 3)), 30, cal, return_local=True)
        assert est == pytest.approx(np.nanmean(local)) and local.shape == (300,)

    def test_isometry_invariance(self, cal):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(400, 4))
        Q = ortho_group.rvs(4, random_state=8)
        assert abs(ess_local_id(X @ Q - 2.0, 40, cal) - ess_local_id(X, 40, cal)) < 1e-9

    def test_k_not_below_n(self, cal):
        with pytest.raises(ContractError):
            ess_local_id(np.zeros((50, 3)), 50, cal)


class TestEmbedding:
    def test_isometry_for_2d(self):
        X = np.random.default_rng(0).normal(size=(50, 2)) @ np.array([[3.0, 0.4], [0.0, 1.0]])
        E = pca_embed_2d(X)
        d0 = np.linalg.norm(X[:, None] - X[None], axis=-1)
        d1 = np.linalg.norm(E[:, None] - E[None], axis=-1)
        assert np.max(np.abs(d0 - d1)) < 1e-9

    def test_variance_order(self):
        E = pca_embed_2d(np.random.default_rng(1).normal(size=(80, 6)) * [5, 1, 3, 1, 1, 1])
        assert E[:, 0].var() >= E[:, 1].var()

    def test_blobs_in_9600d(self):
        rng = np.random.default_rng(2)
        mu = rng.normal(size=9600)
        X = np.vstack([rng.normal(size=(40, 9600)) + mu, rng.normal(size=(40, 9600)) - mu])
        E = pca_embed_2d(X)
        sep = np.linalg.norm(E[:40].mean(0) - E[40:].mean(0))
        spread = max(E[:40].std(0).max(), E[40:].std(0).max())
        assert sep > 5 * spread

    def test_deterministic_orientation(self):
        X = np.random.default_rng(3).normal(size=(30, 4))
        np.testing.assert_array_equal(pca_embed_2d(X), pca_embed_2d(X.copy()))

    def test_zero_variance(self):
        with pytest.raises(DegenerateInputError):
            pca_embed_2d(np.ones((10, 3)))

    def test_csv_round_trip(self, tmp_path):
        E = pca_embed_2d(np.random.default_rng(4).normal(size=(12, 3)))
        labels = np.array(["left_hand", "right_hand"] * 6)
        write_embedding_csv(E, labels, np.arange(12) * 10, tmp_path / "e.csv")
        idx, coords, lab = read_embedding_csv(tmp_path / "e.csv")
        np.testing.assert_array_equal(coords, E)
        assert idx.tolist() == list(range(0, 120, 10)) and lab.tolist() == labels.tolist()


class TestSvm:
    def test_separable_blobs(self):
        rng = np.random.default_rng(0)
        X = np.vstack([rng.normal(size=(50, 2)) + [4, 4], rng.normal(size=(50, 2)) - [4, 4]])
        y = np.array([0] * 50 + [1] * 50)
        res = svm_separability(X, y)
        assert res.accuracy == 1.0
        pred = X @ res.weights + res.bias >= 0
        assert np.mean(pred == (y == 1)) == 1.0

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_shuffled_labels(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(200, 2))
        y = rng.permutation(np.repeat([0, 1], 100))
        assert 0.45 <= svm_separability(X, y).accuracy <= 0.65

    def test_single_class(self):
        with pytest.raises(ContractError):
            svm_separability(np.zeros((5, 2)), np.zeros(5))

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(60, 2))
        y = X[:, 0] > 0.2
        a, b = svm_separability(X, y), svm_separability(X, y)
        assert a.accuracy == b.accuracy and np.array_equal(a.weights, b.weights)


def test_id_cs_correlation():
    r, p = id_cs_correlation([1, 2, 3, 4, 5], [0.1, 0.2, 0.25, 0.4, 0.5])
    assert r > 0.9 and 0 <= p < 0.05
    with pytest.raises(ContractError):
        id_cs_correlation([1, 2], [1, 2])
