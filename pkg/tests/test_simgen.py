import numpy as np
import pytest
from scipy import stats

from specseries.dataset import ZTransform
from specseries.evaluation import UniformModel, test_loss as loss_on
from specseries.dataset import rescale_response
from specseries.simgen import Scenario, ScenarioError, TrueDensityModel, generate, true_density


class TestGenerate:
    def test_manifold_on_circle(self):
        ds = generate(Scenario("manifold", 6, seed=2), 500)
        np.testing.assert_allclose(np.linalg.norm(ds.X, axis=1), 1.0, atol=1e-12)
        assert np.all(ds.X[:, 2:] == 0)

    def test_manifold_angles_uniform(self):
        ds = generate(Scenario("manifold", 2, seed=4), 2000)
        theta = np.mod(np.arctan2(ds.X[:, 1], ds.X[:, 0]), 2 * np.pi)
        assert stats.kstest(theta / (2 * np.pi), "uniform").pvalue > 0.01

    def test_one_relevant_correlation(self):
        ds = generate(Scenario("one_relevant", 4, seed=7), 5000)
        r = np.corrcoef(ds.z, ds.X[:, 0])[0, 1]
        assert r == pytest.approx(np.sqrt(1 / 1.5), abs=0.03)

    def test_non_sparse_slope(self):
        ds = generate(Scenario("non_sparse", 5, seed=8), 5000)
        xbar = ds.X.mean(axis=1)
        slope = np.polyfit(xbar, ds.z, 1)[0]
        assert slope == pytest.approx(1.0, abs=0.05)

    def test_deterministic(self):
        a = generate(Scenario("non_sparse", 3, seed=1), 50)
        b = generate(Scenario("non_sparse", 3, seed=1), 50)
        np.testing.assert_array_equal(a.X, b.X)
        np.testing.assert_array_equal(a.z, b.z)

    def test_torus(self):
        ds = generate(Scenario("manifold", 8, seed=1, intrinsic_dim=3), 10)
        np.testing.assert_allclose(ds.X[:, 0] ** 2 + ds.X[:, 1] ** 2, 1.0)
        assert np.all(ds.X[:, 6:] == 0)

    def test_rotation_keeps_density(self):
        sc = Scenario("manifold", 5, seed=3, rotate=True)
        ds = generate(sc, 20)
        assert np.any(ds.X[:, 2:] != 0)
        true_density(sc, ds.X, [1.0])

    @pytest.mark.parametrize("kw", [dict(kind="cube", d=2), dict(kind="manifold", d=1),
                                    dict(kind="one_relevant", d=2, sigma2=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ScenarioError):
            Scenario(**kw)


class TestTrueDensity:
    def test_peak(self):
        sc = Scenario("one_relevant", 3)
        v = true_density(sc, np.array([[0.0, 5.0, -2.0]]), [0.0])[0, 0]
        assert v == pytest.approx(1 / np.sqrt(2 * np.pi * 0.5), abs=1e-7)

    def test_integrates_to_one(self):
        sc = Scenario("non_sparse", 2)
        z = np.linspace(-10, 10, 20001)
        f = true_density(sc, np.array([[0.3, 0.1]]), z)[0]
        assert np.trapezoid(f, z) == pytest.approx(1.0, abs=1e-4)

    def test_off_manifold(self):
        with pytest.raises(ScenarioError):
            true_density(Scenario("manifold", 3), np.array([[2.0, 0.0, 0.0]]), [0.0])

    def test_unit_scale_mass(self):
        sc = Scenario("one_relevant", 2)
        m = TrueDensityModel(sc, ZTransform(-6.0, 12.0))
        nodes, w, D = m.density_grid(np.array([[0.2, 0.0]]))
        assert D[0] @ w == pytest.approx(1.0, abs=1e-3)

    @pytest.mark.parametrize("kind,d", [("manifold", 3), ("one_relevant", 3), ("non_sparse", 3)])
    def test_oracle_beats_impostors(self, kind, d):
        sc = Scenario(kind, d, seed=11)
        ds = generate(sc, 10_000)
        tf = ZTransform(float(ds.z.min()) - 1, float(np.ptp(ds.z)) + 2)
        test = rescale_response(ds, tf)
        oracle = loss_on(TrueDensityModel(sc, tf), test)

        class Shifted(TrueDensityModel):
            def density_grid(self, X):
                nodes, w, D = super().density_grid(X)
                return nodes, w, np.roll(D, 40, axis=1)

        assert oracle < loss_on(UniformModel(), test)
        assert oracle < loss_on(Shifted(sc, tf), test)
