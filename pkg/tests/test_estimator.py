import warnings
from unittest import mock

import numpy as np
import pytest
from sklearn.base import clone

import specseries.estimator as est
from specseries.dataset import Dataset, rescale_response
from specseries.estimator import (
    CdeModel,
    EstimatorError,
    SpectralSeriesCDE,
    estimate_loss,
    eval_raw,
    fit_coefficients,
    load_model,
    loss_table,
    predict_cdf,
    raw_density_matrix,
    save_model,
    tune,
    tune_delta,
)
from specseries.kernel import KernelSpec, gram
from specseries.simgen import Scenario, generate
from specseries.spectral_basis import SpectralBasis, eigendecompose
from specseries.z_basis import FourierBasis


def _toy(rng, n=30, d=2):
    X = rng.normal(size=(n, d))
    z = 1.0 / (1.0 + np.exp(-X[:, 0] + 0.3 * rng.normal(size=n)))
    return Dataset(X, z)


def _basis(X, eps=1.0, norm="none", J=8):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return eigendecompose(gram(X, KernelSpec(eps, norm)), J)


def _constant_model():
    """beta = [[1]] with phi_1 = 1 and psi_1 = 1 (one point basis)."""
    b = SpectralBasis(np.zeros((1, 1)), KernelSpec(1e6), np.array([1.0]), np.ones((1, 1)), np.ones(1))
    return CdeModel(b, FourierBasis(), np.ones((1, 1)), 1, 1)


class TestCoefficients:
    def test_diffusion_constant_coefficient(self, rng):
        tr = _toy(rng)
        b = _basis(tr.X, norm="diffusion")
        beta = fit_coefficients(tr, b, FourierBasis(), 3, 3)
        assert beta[0, 0] == pytest.approx(1.0, abs=1e-10)

    def test_two_point_hand_average(self):
        a, c = 0.6, 0.8
        b = SpectralBasis(np.array([[0.0], [1.0]]), KernelSpec(1.0), np.array([1.0]),
                          np.array([[a], [c]]), np.ones(2))
        beta = fit_coefficients(Dataset(b.points, [0.2, 0.7]), b, FourierBasis(), 1, 1)
        assert beta[0, 0] == pytest.approx(np.sqrt(2) / 2 * (a + c), abs=1e-15)

    def test_prefix_independence(self, rng):
        tr = _toy(rng)
        b = _basis(tr.X)
        small = fit_coefficients(tr, b, FourierBasis(), 4, 4)
        big = fit_coefficients(tr, b, FourierBasis(), 8, 8)
        np.testing.assert_array_equal(small, big[:4, :4])

    def test_unlabeled_rejected(self, rng):
        tr = _toy(rng)
        tr.z[3] = np.nan
        with pytest.raises(EstimatorError):
            fit_coefficients(tr, _basis(tr.X), FourierBasis(), 2, 2)

    def test_brute_force_sum(self, rng):
        tr = _toy(rng, n=12)
        b = _basis(tr.X, J=5)
        beta = fit_coefficients(tr, b, FourierBasis(), 4, 5)
        psi = b.in_sample_values()
        ref = np.zeros((4, 5))
        fb = FourierBasis()
        for i in range(4):
            for j in range(5):
                ref[i, j] = np.mean([fb.evaluate([tr.z[k]], 4)[0, i] * psi[k, j] for k in range(tr.n)])
        np.testing.assert_allclose(beta, ref, atol=1e-14)


class TestEvaluation:
    def test_constant_model_is_one(self):
        g = eval_raw(_constant_model(), np.zeros(1), np.linspace(0, 1, 11))
        np.testing.assert_allclose(g.values, 1.0)

    def test_triple_loop_oracle(self, rng):
        tr = _toy(rng, n=5)
        b = _basis(tr.X, J=4)
        beta = fit_coefficients(tr, b, FourierBasis(), 3, 4)
        m = CdeModel(b, FourierBasis(), beta, 3, 4)
        x = rng.normal(size=2)
        zs = np.linspace(0, 1, 7)
        from specseries.spectral_basis import nystrom_eval

        fb = FourierBasis()
        ref = [sum(beta[i, j] * fb.evaluate([z], 3)[0, i] * nystrom_eval(b, x, j + 1)
                   for i in range(3) for j in range(4)) for z in zs]
        np.testing.assert_allclose(eval_raw(m, x, zs).values, ref, atol=1e-12)

    def test_linearity_in_beta(self, rng):
        tr = _toy(rng)
        b = _basis(tr.X, J=4)
        beta = fit_coefficients(tr, b, FourierBasis(), 3, 4)
        zs = np.linspace(0, 1, 9)
        X = rng.normal(size=(3, 2))
        f0 = raw_density_matrix(CdeModel(b, FourierBasis(), beta, 3, 4), X, zs, 3, 4)
        beta2 = beta.copy()
        beta2[1, 2] *= 2
        f1 = raw_density_matrix(CdeModel(b, FourierBasis(), beta2, 3, 4), X, zs, 3, 4)
        from specseries.spectral_basis import nystrom_eval_batch

        delta = beta[1, 2] * np.outer(nystrom_eval_batch(b, X, [3])[:, 0], FourierBasis().evaluate(zs, 2)[:, 1])
        np.testing.assert_allclose(f1 - f0, delta, atol=1e-12)

    def test_cutoffs_checked(self, rng):
        m = _constant_model()
        with pytest.raises(EstimatorError):
            eval_raw(m, np.zeros(1), [0.5], I=2)


class TestLoss:
    def test_constant_model(self, rng):
        val = Dataset(rng.normal(size=(20, 1)), rng.uniform(size=20))
        assert estimate_loss(_constant_model(), val) == pytest.approx(-1.0, abs=1e-12)

    def test_empty(self):
        with pytest.raises(EstimatorError):
            estimate_loss(_constant_model(), Dataset(np.zeros((0, 1)), np.zeros(0)))

    def test_table_matches_direct(self, rng):
        tr, val = _toy(rng, 40), _toy(rng, 25)
        b = _basis(tr.X, J=6)
        beta = fit_coefficients(tr, b, FourierBasis(), 5, 6)
        m = CdeModel(b, FourierBasis(), beta, 5, 6)
        from specseries.spectral_basis import nystrom_eval_batch

        L = loss_table(beta, FourierBasis().evaluate(val.z, 5), nystrom_eval_batch(b, val.X))
        for I in range(1, 6):
            for J in range(1, 7):
                assert L[I - 1, J - 1] == pytest.approx(estimate_loss(m, val, I, J), abs=1e-12)


class TestTune:
    def _data(self, rng):
        sc = Scenario("one_relevant", 2, seed=int(rng.integers(1 << 30)))
        ds = rescale_response(generate(sc, 200))
        return ds.subset(np.arange(140)), ds.subset(np.arange(140, 200))

    def test_single_cell(self, rng):
        tr, val = self._data(rng)
        res = tune(tr, val, [0.5], [3], [4])
        assert (res.model.epsilon, res.model.I, res.model.J) == (0.5, 3, 4)
        assert res.n_coefficient_fits == 1

    def test_fit_calls_equal_epsilon_count(self, rng):
        tr, val = self._data(rng)
        with mock.patch.object(est, "fit_coefficients", wraps=est.fit_coefficients) as spy:
            res = tune(tr, val, [0.2, 0.5, 1.0], range(1, 9), range(1, 11))
        assert spy.call_count == 3 == res.n_coefficient_fits

    def test_argmin_of_exhaustive_table(self, rng):
        tr, val = self._data(rng)
        res = tune(tr, val, [0.3, 1.0], [1, 2, 3, 5], [2, 4, 8])
        best = min(r["loss"] for r in res.table)
        assert res.best_loss == best
        m = res.model
        chosen = [r for r in res.table if (r["epsilon"], r["I"], r["J"]) == (m.epsilon, m.I, m.J)]
        assert chosen[0]["loss"] == best

    def test_tie_prefers_smaller_I(self, rng):
        # sin(2 pi z) vanishes (to rounding) at z in {0, 1/2}: I = 3 adds a zero coefficient
        X = rng.normal(size=(40, 1))
        z = np.where(X[:, 0] > 0, 0.5, 0.0)
        tr, val = Dataset(X[:30], z[:30]), Dataset(X[30:], z[30:])
        res = tune(tr, val, [1.0], [2, 3], [3])
        assert res.model.I == 2

    def test_unlabeled_enlarges_basis_only(self, rng):
        tr, val = self._data(rng)
        unl = Dataset(rng.normal(size=(50, 2)))
        res = tune(tr, val, [0.5], [3], [4], unlabeled=unl)
        assert res.model.basis.n == tr.n + 50
        psi = res.model.basis.in_sample_values()[: tr.n, :4]
        np.testing.assert_allclose(res.model.beta, FourierBasis().evaluate(tr.z, 3).T @ psi / tr.n)


class TestPostprocessing:
    def test_delta_singleton(self, rng):
        tr, val = TestTune()._data(rng)
        m = tune(tr, val, [0.5], [5], [6]).model
        assert tune_delta(m, val, [0.0])[0] == 0.0

    def test_density_grid_bona_fide(self, rng):
        tr, val = TestTune()._data(rng)
        m = tune(tr, val, [0.5], [10], [10]).model
        m.delta = 0.05
        nodes, w, D = m.density_grid(rng.normal(size=(30, 2)))
        assert D.min() >= 0
        np.testing.assert_allclose(D @ w, 1.0, atol=1e-6)

    def test_cdf_monotone_and_endpoints(self, rng):
        tr, val = TestTune()._data(rng)
        m = tune(tr, val, [0.5], [6], [6]).model
        x = np.tile(rng.normal(size=2), (5, 1))
        F = predict_cdf(m, x, [0.0, 0.2, 0.5, 0.9, 1.0])
        assert F[0] == 0.0 and F[-1] == 1.0
        assert np.all(np.diff(F) >= 0)

    def test_oscillation_removed_by_delta(self):
        # truncated series of a narrow bump rings; removing small bumps lowers the loss
        rng = np.random.default_rng(5)
        X = rng.normal(size=(600, 1))
        z = np.clip(0.5 + 0.02 * rng.normal(size=600), 0, 1)
        ds = Dataset(X, z)
        tr, val = ds.subset(np.arange(400)), ds.subset(np.arange(400, 600))
        m = tune(tr, val, [2.0], [9], [1]).model
        delta, losses = tune_delta(m, val, [0.0, 0.05, 0.1])
        assert delta > 0
        assert losses[delta] < losses[0.0]


class TestSerialization:
    def test_bit_exact_roundtrip(self, tmp_path, rng):
        tr, val = TestTune()._data(rng)
        m = tune(tr, val, [0.5], [4], [5], normalization="diffusion").model
        m.delta = 0.025
        save_model(m, tmp_path / "m.npz")
        m2 = load_model(tmp_path / "m.npz")
        assert (m2.I, m2.J, m2.delta, m2.epsilon) == (m.I, m.J, m.delta, m.epsilon)
        np.testing.assert_array_equal(m2.beta, m.beta)
        X = rng.normal(size=(4, 2))
        np.testing.assert_array_equal(m2.density_grid(X)[2], m.density_grid(X)[2])


class TestSklearnApi:
    def test_params_and_clone(self):
        e = SpectralSeriesCDE(normalization="diffusion", i_grid=[1, 2])
        assert clone(e).get_params()["normalization"] == "diffusion"

    def test_fit_predict(self, rng):
        sc = Scenario("one_relevant", 3, seed=1)
        ds = generate(sc, 300)
        e = SpectralSeriesCDE(epsilon_grid=[0.5, 1.0, 2.0], i_grid=range(1, 11), j_grid=range(1, 21)).fit(ds.X, ds.z)
        z, D = e.predict_density(ds.X[:5])
        assert D.shape == (5, z.size)
        np.testing.assert_allclose(np.trapezoid(D, z, axis=1), 1.0, atol=1e-3)
        assert e.n_coefficient_fits_ == 3
        assert np.isfinite(e.score(ds.X[:50], ds.z[:50]))
        F = e.predict_cdf(ds.X[:3], [z[0], 0.0, z[-1]])
        assert F[0] == 0.0 and F[2] == 1.0

    def test_not_fitted(self):
        from sklearn.exceptions import NotFittedError

        with pytest.raises(NotFittedError):
            SpectralSeriesCDE().predict(np.zeros((1, 2)))
