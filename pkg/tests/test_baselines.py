import numpy as np
import pytest
from scipy.stats import norm

from specseries.baselines import (
    KDECDE,
    KNNCDE,
    BaselineError,
    KdeCdeSpec,
    KnnCdeSpec,
    fit_kde,
    kde_cde,
    knn_cde,
    tune_baseline,
)
from specseries.dataset import Dataset
from specseries.z_basis import trapezoid_weights

NODES = np.linspace(0, 1, 1001)
W = trapezoid_weights(NODES)


def _trunc(mu, s):
    f = norm.pdf(NODES, mu, s)
    return f / (f @ W)


class TestKnn:
    def test_single_neighbour(self, rng):
        tr = Dataset(rng.normal(size=(10, 2)), rng.uniform(size=10))
        x = tr.X[4] + 1e-6
        D = knn_cde(tr, KnnCdeSpec(1, 0.05), x, NODES)[0]
        np.testing.assert_allclose(D, _trunc(tr.z[4], 0.05), rtol=1e-12)

    def test_brute_force_all_neighbours(self, rng):
        tr = Dataset(rng.normal(size=(8, 2)), rng.uniform(size=8))
        D = knn_cde(tr, KnnCdeSpec(8, 0.1), rng.normal(size=2), NODES)[0]
        ref = sum(norm.pdf(NODES, zk, 0.1) for zk in tr.z) / 8
        np.testing.assert_allclose(D, ref / (ref @ W), rtol=1e-12)

    def test_permutation_invariant(self, rng):
        tr = Dataset(rng.normal(size=(30, 3)), rng.uniform(size=30))
        p = rng.permutation(30)
        q = rng.normal(size=(4, 3))
        a = knn_cde(tr, KnnCdeSpec(5, 0.1), q, NODES)
        b = knn_cde(tr.subset(p), KnnCdeSpec(5, 0.1), q, NODES)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_spec_validation(self):
        with pytest.raises(BaselineError):
            KnnCdeSpec(0, 0.1)
        with pytest.raises(BaselineError):
            KnnCdeSpec(2, 0.0)


class TestKde:
    def test_single_point_ignores_x(self):
        tr = Dataset(np.array([[0.3, -1.0]]), np.array([0.4]))
        D = kde_cde(tr, KdeCdeSpec(0.5, 0.07), np.array([[10.0, 3.0], [0.0, 0.0]]), NODES)
        np.testing.assert_allclose(D, np.tile(_trunc(0.4, 0.07), (2, 1)), rtol=1e-10)

    def test_equidistant_two_points(self):
        tr = Dataset(np.array([[-1.0], [1.0]]), np.array([0.2, 0.8]))
        D = kde_cde(tr, KdeCdeSpec(0.7, 0.05), np.array([[0.0]]), NODES)[0]
        ref = 0.5 * norm.pdf(NODES, 0.2, 0.05) + 0.5 * norm.pdf(NODES, 0.8, 0.05)
        np.testing.assert_allclose(D, ref / (ref @ W), rtol=1e-10)

    def test_double_kde_oracle(self, rng):
        tr = Dataset(rng.normal(size=(20, 3)), rng.uniform(size=20))
        x = rng.normal(size=3)
        h, hz = 0.8, 0.1
        kx = np.array([np.prod(norm.pdf(x, xk, h)) for xk in tr.X])
        joint = sum(kx[k] * norm.pdf(NODES, tr.z[k], hz) for k in range(20)) / 20
        ref = joint / (kx.mean())
        ref = ref / (ref @ W)
        np.testing.assert_allclose(kde_cde(tr, KdeCdeSpec(h, hz), x, NODES)[0], ref, rtol=1e-10)

    def test_underflow_guard(self):
        tr = Dataset(np.zeros((3, 1)), np.array([0.2, 0.5, 0.7]))
        with pytest.warns(RuntimeWarning, match="1e-300"):
            D = kde_cde(tr, KdeCdeSpec(0.01, 0.1), np.array([[50.0]]), NODES)[0]
        np.testing.assert_allclose(D, 1.0)

    def test_affine_invariance_after_standardizing(self, rng):
        X = rng.normal(size=(60, 2))
        z = rng.uniform(size=60)
        tr, val = Dataset(X[:40], z[:40]), Dataset(X[40:], z[40:])
        A = np.array([3.0, 0.2])
        tr2, val2 = Dataset(X[:40] * A + 7, z[:40]), Dataset(X[40:] * A + 7, z[40:])
        grid = [KdeCdeSpec(h, 0.1) for h in (0.3, 0.6)]
        m1, m2 = fit_kde(tr, val, grid), fit_kde(tr2, val2, grid)
        assert m1.spec == m2.spec
        np.testing.assert_allclose(m1.density_grid(X[40:45])[2], m2.density_grid(X[40:45] * A + 7)[2], rtol=1e-9)


class TestTuning:
    def test_singleton(self, rng):
        tr = Dataset(rng.normal(size=(20, 1)), rng.uniform(size=20))
        s = KnnCdeSpec(3, 0.1)
        assert tune_baseline(tr, tr, [s])[0] == s

    def test_empty(self, rng):
        tr = Dataset(rng.normal(size=(5, 1)), rng.uniform(size=5))
        with pytest.raises(BaselineError):
            tune_baseline(tr, tr, [])

    def test_argmin(self, rng):
        tr = Dataset(rng.normal(size=(50, 1)), rng.uniform(size=50))
        val = Dataset(rng.normal(size=(20, 1)), rng.uniform(size=20))
        grid = [KnnCdeSpec(n, b) for n in (1, 4, 16) for b in (0.05, 0.2)]
        best, losses = tune_baseline(tr, val, grid)
        assert losses[best] == min(losses.values())

    @pytest.mark.parametrize("cls", [KNNCDE, KDECDE])
    def test_estimator_api(self, rng, cls):
        X = rng.normal(size=(120, 2))
        y = X[:, 0] + 0.3 * rng.normal(size=120)
        e = cls().fit(X, y)
        z, D = e.predict_density(X[:3])
        np.testing.assert_allclose(np.trapezoid(D, z, axis=1), 1.0, atol=1e-6)
