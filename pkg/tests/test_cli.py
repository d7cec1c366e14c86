import csv
import time

import numpy as np
import pytest

from specseries.cli import main


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["gen", "--scenario", "manifold", "--d", "20", "--n", "1000", "--seed", "1", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def small_model(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("fit")
    rc = main(["fit", "--data", str(data_dir), "--epsilon-grid", "0.05,0.2", "--i-grid", "1:8",
               "--j-grid", "1:10", "--out", str(out)])
    assert rc == 0
    return out


class TestGen:
    def test_split_sizes(self, data_dir):
        sizes = [len(_rows(data_dir / f"{p}.csv")) for p in ("train", "val", "test")]
        assert sizes == [700, 150, 150]
        assert (data_dir / "config.ini").exists()

    def test_byte_identical(self, data_dir, tmp_path):
        main(["gen", "--scenario", "manifold", "--d", "20", "--n", "1000", "--seed", "1", "--out", str(tmp_path)])
        for p in ("train", "val", "test"):
            assert (tmp_path / f"{p}.csv").read_bytes() == (data_dir / f"{p}.csv").read_bytes()

    def test_invalid_scenario(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["gen", "--scenario", "spiral", "--out", str(tmp_path)])
        assert exc.value.code != 0

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "c.ini"
        cfg.write_text("[gen]\nn = 40\nd = 3\nscenario = non_sparse\n")
        assert main(["--config", str(cfg), "gen", "--n", "60", "--out", str(tmp_path / "o")]) == 0
        assert len(_rows(tmp_path / "o" / "train.csv")) == 42
        assert "scenario = non_sparse" in (tmp_path / "o" / "config.ini").read_text()


class TestFit:
    def test_singleton_smoke(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(100, 2))
        data = tmp_path / "toy.csv"
        np.savetxt(data, np.column_stack([X, X[:, 0] + rng.normal(size=100)]), delimiter=",")
        t = time.perf_counter()
        rc = main(["fit", "--data", str(data), "--epsilon-grid", "1.0", "--i-grid", "3", "--j-grid", "5",
                   "--delta-grid", "0", "--out", str(tmp_path / "m")])
        assert rc == 0 and time.perf_counter() - t < 5
        assert (tmp_path / "m" / "model.npz").exists()

    def test_report_argmin_matches_model(self, small_model):
        rows = _rows(small_model / "tuning.csv")
        assert len(rows) == 2 * 8 * 10
        best = min(rows, key=lambda r: float(r["loss"]))
        assert best["selected"] == "1"
        rep = (small_model / "fit_report.txt").read_text()
        assert f"I = {best['I']}\n" in rep and f"J = {best['J']}\n" in rep
        assert "coefficient_fits = 2" in rep
        for phase in ("gram", "eigen", "coefficients", "loss"):
            assert f"time_{phase}" in rep

    @pytest.mark.parametrize("estimator", ["knn", "kde"])
    def test_baselines(self, data_dir, tmp_path, estimator):
        assert main(["fit", "--data", str(data_dir), "--estimator", estimator, "--out", str(tmp_path)]) == 0
        assert main(["evaluate", "--model", str(tmp_path / "model.npz"), "--data", str(data_dir / "test.csv"),
                     "--bootstrap", "20", "--out", str(tmp_path / "ev")]) == 0

    def test_flags_exist(self, data_dir, tmp_path):
        rc = main(["fit", "--data", str(data_dir), "--epsilon-grid", "0.2", "--i-grid", "2", "--j-grid", "3",
                   "--normalization", "density", "--method", "randomized", "--sparsity-threshold", "0.01",
                   "--zbasis", "fourier", "--unlabeled", str(data_dir / "test.csv"), "--seed", "3",
                   "--out", str(tmp_path)])
        assert rc == 0


class TestPredict:
    def test_integrates_to_one(self, small_model, data_dir, tmp_path):
        assert main(["predict", "--model", str(small_model / "model.npz"), "--data", str(data_dir / "train.csv"),
                     "--out", str(tmp_path)]) == 0
        rows = _rows(tmp_path / "predictions.csv")
        z = np.array([float(r["z"]) for r in rows if r["row_id"] == "0"])
        f = np.array([float(r["density"]) for r in rows if r["row_id"] == "0"])
        assert np.trapezoid(f, z) == pytest.approx(1.0, abs=1e-3)

    def test_external_reintegration(self, small_model, data_dir, tmp_path):
        from specseries.estimator import load_model

        main(["predict", "--model", str(small_model / "model.npz"), "--data", str(data_dir / "test.csv"),
              "--out", str(tmp_path)])
        rows = _rows(tmp_path / "predictions.csv")
        m = load_model(small_model / "model.npz")
        X = np.loadtxt(data_dir / "test.csv", delimiter=",", skiprows=1)[:2, :-1]
        nodes, w, D = m.density_grid(X)
        for r in range(2):
            z = np.array([float(q["z"]) for q in rows if q["row_id"] == str(r)])
            f = np.array([float(q["density"]) for q in rows if q["row_id"] == str(r)])
            assert np.trapezoid(f, z) == pytest.approx(D[r] @ w, abs=1e-9)

    def test_empty_query(self, small_model, tmp_path):
        q = tmp_path / "q.csv"
        q.write_text("")
        assert main(["predict", "--model", str(small_model / "model.npz"), "--data", str(q),
                     "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "predictions.csv").read_text() == "row_id,z,density\n"

    def test_dimension_mismatch(self, small_model, tmp_path):
        q = tmp_path / "q.csv"
        q.write_text("1,2,3\n")
        assert main(["predict", "--model", str(small_model / "model.npz"), "--data", str(q),
                     "--out", str(tmp_path / "o")]) != 0


class TestEvaluate:
    def test_reproducible_and_b_override(self, small_model, data_dir, tmp_path):
        args = ["evaluate", "--model", str(small_model / "model.npz"), "--data", str(data_dir / "test.csv"),
                "--bootstrap", "50", "--seed", "4"]
        main(args + ["--out", str(tmp_path / "a")])
        main(args + ["--out", str(tmp_path / "b")])
        a = (tmp_path / "a" / "report.txt").read_text()
        assert a == (tmp_path / "b" / "report.txt").read_text()
        assert "B = 50" in a
        for f in ("report.csv", "pit.csv", "pit_hist.csv"):
            assert (tmp_path / "a" / f).exists()

    def test_uniform(self, data_dir, tmp_path):
        assert main(["evaluate", "--model", "uniform", "--data", str(data_dir / "test.csv"), "--out", str(tmp_path)]) == 0
        rep = dict(line.split(" = ") for line in (tmp_path / "report.txt").read_text().splitlines())
        assert float(rep["loss"]) == pytest.approx(-1.0, abs=1e-12)


class TestBench:
    def test_rows(self, tmp_path):
        rc = main(["bench", "--scenario", "one_relevant", "--d", "2,3", "--n", "120", "--reps", "2",
                   "--methods", "series,knn", "--bootstrap", "10", "--epsilon-grid", "0.5,1",
                   "--i-grid", "1:5", "--j-grid", "1:8", "--out", str(tmp_path)])
        assert rc == 0
        rows = _rows(tmp_path / "bench.csv")
        assert len(rows) == 8
        assert all(r["status"] == "ok" for r in rows)
        keys = [(r["method"], r["scenario"], int(r["d"]), int(r["seed"])) for r in rows]
        assert keys == sorted(keys)

    def test_failure_recorded(self, tmp_path):
        rc = main(["bench", "--scenario", "one_relevant", "--d", "2", "--n", "60", "--reps", "1",
                   "--methods", "series", "--j-grid", "1:500", "--bootstrap", "10", "--out", str(tmp_path)])
        assert rc == 0
        assert _rows(tmp_path / "bench.csv")[0]["status"].startswith("error")
