"""Command-line interface: ``specseries {gen,fit,predict,evaluate,bench}``.

Options may also come from an INI file (``--config``) with one section per
subcommand; keys are flag names without the leading dashes.  Flags given on
the command line win.  The fully resolved configuration is written to
``<out>/config.ini``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .baselines import BaselineModel, KdeCdeSpec, KnnCdeSpec, fit_kde, fit_knn
from .dataset import (
    DataError,
    Dataset,
    SplitSpec,
    Standardizer,
    ZTransform,
    fit_response_transform,
    load_csv,
    rescale_response,
    save_csv,
    split,
    split_sizes,
)
from .estimator import (
    DEFAULT_DELTA_GRID,
    default_epsilon_grid,
    default_i_grid,
    default_j_grid,
    model_arrays,
    model_from_arrays,
    tune,
    tune_delta,
)
from .evaluation import UniformModel, evaluate, pit_histogram
from .simgen import KINDS, Scenario, generate
from .z_basis import make_zbasis

logger = logging.getLogger("specseries")

NORMALIZATION_FLAGS = {"none": "none", "diffusion": "diffusion", "density": "density_renormalized"}
BENCH_METHODS = ("series", "series_diffusion", "knn", "kde")

# option name -> (default, type) shared by all subcommands
DEFAULTS = {
    "data": (None, str),
    "scenario": ("one_relevant", str),
    "d": ("5", str),
    "n": (1000, int),
    "seed": (0, int),
    "sigma2": (0.5, float),
    "epsilon_grid": ("auto", str),
    "i_grid": ("auto", str),
    "j_grid": ("auto", str),
    "delta_grid": (",".join(str(v) for v in DEFAULT_DELTA_GRID), str),
    "normalization": ("none", str),
    "method": ("dense", str),
    "sparsity_threshold": (0.0, float),
    "zbasis": ("fourier", str),
    "unlabeled": (None, str),
    "bootstrap": (500, int),
    "out": (".", str),
    "estimator": ("series", str),
    "model": (None, str),
    "n_grid": (1000, int),
    "methods": (",".join(BENCH_METHODS), str),
    "reps": (2, int),
    "jobs": (1, int),
}


class CliError(RuntimeError):
    pass


def derive_seed(seed: int, label: str) -> int:
    """Independent sub-seed for a named purpose."""
    h = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


# --- argument handling ---------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser, names):
    help_ = {
        "data": "input CSV file or directory holding train/val/test CSVs",
        "scenario": f"simulation scenario ({', '.join(KINDS)}); comma list for bench",
        "d": "covariate dimension; comma list for bench",
        "n": "sample size",
        "seed": "master seed",
        "epsilon_grid": "comma list of kernel bandwidths or 'auto'",
        "i_grid": "comma list or a:b range of response cutoffs, or 'auto'",
        "j_grid": "comma list or a:b range of covariate cutoffs, or 'auto'",
        "delta_grid": "comma list of bump-removal thresholds",
        "sparsity_threshold": "zero raw kernel values below this",
        "unlabeled": "CSV of extra unlabeled covariates for the basis",
        "bootstrap": "bootstrap replicates for the loss standard error",
        "out": "output directory",
    }
    choices = {
        "normalization": list(NORMALIZATION_FLAGS),
        "method": ["dense", "randomized"],
        "zbasis": ["fourier", "indicator"],
        "estimator": ["series", "knn", "kde"],
    }
    for name in names:
        flag = "--" + name.replace("_", "-")
        typ = DEFAULTS[name][1]
        p.add_argument(flag, dest=name, default=None, type=typ, choices=choices.get(name),
                       help=help_.get(name))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="specseries", description="Spectral series conditional density estimation")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", default=None, help="INI file with one section per subcommand")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="simulate a scenario and write train/val/test CSVs")
    _add_common(p, ["scenario", "d", "n", "seed", "sigma2", "out"])

    p = sub.add_parser("fit", help="tune an estimator and save it")
    _add_common(p, ["data", "seed", "epsilon_grid", "i_grid", "j_grid", "delta_grid", "normalization",
                    "method", "sparsity_threshold", "zbasis", "unlabeled", "estimator", "n_grid", "out"])

    p = sub.add_parser("predict", help="density grids for query points")
    _add_common(p, ["model", "data", "out"])

    p = sub.add_parser("evaluate", help="test loss, bootstrap SE and PIT/KS report")
    _add_common(p, ["model", "data", "seed", "bootstrap", "out"])

    p = sub.add_parser("bench", help="sweep methods over scenarios, dimensions and seeds")
    _add_common(p, ["scenario", "d", "n", "seed", "sigma2", "methods", "reps", "bootstrap", "epsilon_grid",
                    "i_grid", "j_grid", "delta_grid", "method", "sparsity_threshold", "jobs", "out"])
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags over the config-file section over built-in defaults."""
    file_vals: dict = {}
    if args.config:
        cp = configparser.ConfigParser()
        if not cp.read(args.config):
            raise CliError(f"cannot read config file {args.config}")
        for section in ("common", args.command):
            if cp.has_section(section):
                file_vals.update({k.replace("-", "_"): v for k, v in cp.items(section)})
    cfg = {}
    for name, value in vars(args).items():
        if name not in DEFAULTS:
            continue
        default, typ = DEFAULTS[name]
        if value is not None:
            cfg[name] = value
        elif name in file_vals:
            cfg[name] = typ(file_vals[name])
        else:
            cfg[name] = default
    unknown = set(file_vals) - set(DEFAULTS)
    if unknown:
        raise CliError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return cfg


def echo_config(cfg: dict, command: str, out: Path) -> None:
    cp = configparser.ConfigParser()
    cp[command] = {k: "" if v is None else str(v) for k, v in sorted(cfg.items())}
    with (out / "config.ini").open("w") as fh:
        cp.write(fh)


def _float_list(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v.strip()]


def _int_list(s: str) -> list[int]:
    out: list[int] = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" in part:
            a, b = part.split(":")
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    return out


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {out}: {exc}") from exc
    return out


# --- model files ---------------------------------------------------------------------------

def save_any(model, path: Path, z_transform: ZTransform) -> None:
    if isinstance(model, BaselineModel):
        arrs = {"kind": np.array("knn" if isinstance(model.spec, KnnCdeSpec) else "kde"),
                "train_X": model.train.X, "train_z": model.train.z, "n_grid": np.array(model.n_grid),
                "spec": np.array([float(v) for v in vars(model.spec).values()]),
                "z_offset": np.array(z_transform.offset), "z_scale": np.array(z_transform.scale)}
        if model.standardizer is not None:
            arrs["x_mean"] = model.standardizer.mean
            arrs["x_scale"] = model.standardizer.scale
    else:
        arrs = {"kind": np.array("series"), **model_arrays(model)}
    with path.open("wb") as fh:
        np.savez(fh, **arrs)


def load_any(path):
    """Return ``(model, z_transform)``; ``'uniform'`` gives the uniform reference."""
    if str(path) == "uniform":
        return UniformModel(), None
    try:
        arrs = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read model file {path}: {exc}") from exc
    with arrs:
        kind = str(arrs["kind"])
        if kind == "series":
            m = model_from_arrays(arrs)
            return m, m.z_transform
        tf = ZTransform(float(arrs["z_offset"]), float(arrs["z_scale"]))
        s = arrs["spec"]
        spec = KnnCdeSpec(int(s[0]), float(s[1])) if kind == "knn" else KdeCdeSpec(float(s[0]), float(s[1]))
        st = Standardizer(np.array(arrs["x_mean"]), np.array(arrs["x_scale"])) if "x_mean" in arrs else None
        train = Dataset(np.array(arrs["train_X"]), np.array(arrs["train_z"]))
        return BaselineModel(train, spec, int(arrs["n_grid"]), st), tf


def _model_dim(model) -> int | None:
    if isinstance(model, BaselineModel):
        return model.train.d
    if isinstance(model, UniformModel):
        return None
    return model.d


# --- data helpers --------------------------------------------------------------------------

def _load_train_val(cfg: dict):
    if cfg["data"] is None:
        raise CliError("--data is required")
    p = Path(cfg["data"])
    if p.is_dir():
        train = load_csv(p / "train.csv", response_column=-1)
        val = load_csv(p / "val.csv", response_column=-1)
    else:
        ds = load_csv(p, response_column=-1).labeled()
        train, val, _ = split(ds, SplitSpec(seed=derive_seed(cfg["seed"], "split")))
    return train, val


def _load_labeled(path) -> Dataset:
    p = Path(path)
    return load_csv(p / "test.csv" if p.is_dir() else p, response_column=-1)


def _load_query(path, d: int | None) -> np.ndarray:
    try:
        ds = load_csv(path)
    except DataError as exc:
        if "empty file" in str(exc):
            return np.empty((0, d or 0))
        raise
    X = ds.X
    if d is not None and X.shape[1] == d + 1:
        X = X[:, :d]  # trailing response column
    if d is not None and X.shape[0] and X.shape[1] != d:
        raise CliError(f"query has {X.shape[1]} covariates but the model expects {d}")
    if X.shape[0] == 0:
        return np.empty((0, d or X.shape[1]))
    return X


# --- commands ------------------------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    out = _out_dir(cfg)
    d = int(cfg["d"])
    sc = Scenario(cfg["scenario"], d, cfg["sigma2"], derive_seed(cfg["seed"], "gen"))
    ds = generate(sc, cfg["n"])
    parts = split(ds, SplitSpec(seed=derive_seed(cfg["seed"], "split")))
    for name, part in zip(("train", "val", "test"), parts):
        save_csv(part, out / f"{name}.csv")
    echo_config(cfg, "gen", out)
    print("sizes: train={} val={} test={}".format(*split_sizes(ds.n, SplitSpec())))
    return 0


def _series_grids(cfg: dict, train: Dataset, n_basis: int):
    eps = (default_epsilon_grid(train.X, seed=derive_seed(cfg["seed"], "eps"))
           if cfg["epsilon_grid"] == "auto" else _float_list(cfg["epsilon_grid"]))
    I = default_i_grid() if cfg["i_grid"] == "auto" else _int_list(cfg["i_grid"])
    J = default_j_grid(n_basis) if cfg["j_grid"] == "auto" else _int_list(cfg["j_grid"])
    return list(eps), I, J


def fit_series(cfg: dict, train: Dataset, val: Dataset, unlabeled: Dataset | None = None):
    """Tune a series model on raw-scale data; returns ``(model, tune_result, delta_losses)``."""
    tf = fit_response_transform(train)
    train_u, val_u = rescale_response(train, tf), rescale_response(val, tf)
    n_basis = train.n + (0 if unlabeled is None else unlabeled.n)
    eps, I, J = _series_grids(cfg, train, n_basis)
    zb = make_zbasis(cfg.get("zbasis", "fourier"), train.z, tf.offset, tf.scale)
    if zb.max_index is not None:
        I = [i for i in I if i <= zb.max_index] or [zb.max_index]
    res = tune(train_u, val_u, eps, I, J, zb, normalization=NORMALIZATION_FLAGS[cfg["normalization"]],
               method=cfg["method"], sparsity_threshold=cfg["sparsity_threshold"], unlabeled=unlabeled,
               seed=derive_seed(cfg["seed"], "eigen"), n_grid=cfg.get("n_grid", 1000))
    t = time.perf_counter()
    delta, delta_losses = tune_delta(res.model, val_u, _float_list(cfg["delta_grid"]))
    res.timings["delta"] = time.perf_counter() - t
    res.model.delta = delta
    return res.model, res, delta_losses


def cmd_fit(cfg: dict) -> int:
    out = _out_dir(cfg)
    train, val = _load_train_val(cfg)
    train, val = train.labeled(), val.labeled()
    echo_config(cfg, "fit", out)
    est = cfg["estimator"]
    if est == "series":
        unl = None
        if cfg["unlabeled"]:
            u = load_csv(cfg["unlabeled"])
            unl = Dataset(u.X[:, : train.d])
        model, res, delta_losses = fit_series(cfg, train, val, unl)
        save_any(model, out / "model.npz", model.z_transform)
        with (out / "tuning.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epsilon", "I", "J", "loss", "selected"])
            for row in res.table:
                sel = (row["epsilon"] == model.epsilon and row["I"] == model.I and row["J"] == model.J)
                w.writerow([repr(row["epsilon"]), row["I"], row["J"], repr(row["loss"]), int(sel)])
        lines = [
            "estimator = series",
            f"epsilon = {model.epsilon!r}", f"I = {model.I}", f"J = {model.J}", f"delta = {model.delta!r}",
            f"validation_loss = {res.best_loss!r}",
            f"coefficient_fits = {res.n_coefficient_fits}",
            f"grid_size = {len(res.table)}",
        ]
        lines += [f"delta_loss[{d!r}] = {v!r}" for d, v in delta_losses.items()]
        lines += [f"time_{k} = {v:.6f}" for k, v in res.timings.items()]
    else:
        tf = fit_response_transform(train)
        tu, vu = rescale_response(train, tf), rescale_response(val, tf)
        t = time.perf_counter()
        model = fit_knn(tu, vu) if est == "knn" else fit_kde(tu, vu)
        elapsed = time.perf_counter() - t
        save_any(model, out / "model.npz", tf)
        lines = [f"estimator = {est}"] + [f"{k} = {v!r}" for k, v in vars(model.spec).items()]
        lines.append(f"time_fit = {elapsed:.6f}")
    (out / "fit_report.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines[:6]))
    return 0


def cmd_predict(cfg: dict) -> int:
    out = _out_dir(cfg)
    if cfg["model"] is None or cfg["data"] is None:
        raise CliError("predict needs --model and --data")
    model, tf = load_any(cfg["model"])
    X = _load_query(cfg["data"], _model_dim(model))
    with (out / "predictions.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "z", "density"])
        if X.shape[0]:
            nodes, _, D = model.density_grid(X)
            discrete = getattr(model, "discrete", False)
            z = nodes if tf is None else tf.inverse(nodes)
            if tf is not None and not discrete:
                D = D / tf.scale
            for r in range(D.shape[0]):
                for g in range(z.size):
                    w.writerow([r, repr(float(z[g])), repr(float(D[r, g]))])
    echo_config(cfg, "predict", out)
    print(f"wrote {X.shape[0]} density grid(s) to {out / 'predictions.csv'}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    out = _out_dir(cfg)
    if cfg["model"] is None or cfg["data"] is None:
        raise CliError("evaluate needs --model and --data")
    model, tf = load_any(cfg["model"])
    test = _load_labeled(cfg["data"]).labeled()
    d = _model_dim(model)
    if d is not None and test.d != d:
        raise CliError(f"test data has {test.d} covariates but the model expects {d}")
    test_u = rescale_response(test, tf if tf is not None else fit_response_transform(test))
    report, u = evaluate(model, test_u, cfg["bootstrap"], derive_seed(cfg["seed"], "bootstrap"))
    (out / "report.txt").write_text(report.to_text())
    (out / "report.csv").write_text(report.to_csv_row(header=True))
    with (out / "pit.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row_id", "u"])
        w.writerows([k, repr(float(v))] for k, v in enumerate(u))
    edges, counts = pit_histogram(u)
    with (out / "pit_hist.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lo", "hi", "count"])
        w.writerows([repr(float(edges[i])), repr(float(edges[i + 1])), int(counts[i])] for i in range(counts.size))
    echo_config(cfg, "evaluate", out)
    print(report.to_text(), end="")
    return 0


BENCH_COLUMNS = ["method", "scenario", "d", "seed", "n", "loss", "loss_se", "fit_time", "gram_time", "status"]


def run_cell(cell: dict) -> dict:
    """One benchmark cell; failures are recorded, never raised."""
    cfg, method, kind, d, rep = cell["cfg"], cell["method"], cell["scenario"], cell["d"], cell["rep"]
    seed = derive_seed(cfg["seed"], f"bench:{kind}:{d}:{rep}")
    row = {"method": method, "scenario": kind, "d": d, "seed": rep, "n": cfg["n"],
           "loss": "", "loss_se": "", "fit_time": "", "gram_time": "", "status": "ok"}
    try:
        ds = generate(Scenario(kind, d, cfg["sigma2"], seed), cfg["n"])
        train, val, test = split(ds, SplitSpec(seed=derive_seed(seed, "split")))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            t = time.perf_counter()
            if method.startswith("series"):
                c = dict(cfg, normalization="diffusion" if method == "series_diffusion" else "none",
                         zbasis="fourier", seed=seed)
                model, res, _ = fit_series(c, train, val)
                tf = model.z_transform
                row["gram_time"] = res.timings["gram"]
            else:
                tf = fit_response_transform(train)
                tu, vu = rescale_response(train, tf), rescale_response(val, tf)
                model = fit_knn(tu, vu) if method == "knn" else fit_kde(tu, vu)
            row["fit_time"] = time.perf_counter() - t
            rep_, _ = evaluate(model, rescale_response(test, tf), cfg["bootstrap"], derive_seed(seed, "bootstrap"))
        row["loss"], row["loss_se"] = rep_.loss, rep_.loss_se
    except Exception as exc:  # noqa: BLE001 - recorded per cell
        row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def cmd_bench(cfg: dict) -> int:
    out = _out_dir(cfg)
    methods = [m.strip() for m in cfg["methods"].split(",") if m.strip()]
    bad = set(methods) - set(BENCH_METHODS)
    if bad:
        raise CliError(f"unknown bench method(s): {', '.join(sorted(bad))}")
    kinds = [s.strip() for s in cfg["scenario"].split(",") if s.strip()]
    for k in kinds:
        if k not in KINDS:
            raise CliError(f"unknown scenario {k!r}")
    dims = _int_list(str(cfg["d"]))
    cells = [{"cfg": cfg, "method": m, "scenario": k, "d": d, "rep": r}
             for m in methods for k in kinds for d in dims for r in range(cfg["reps"])]
    if cfg["jobs"] > 1:
        with ProcessPoolExecutor(cfg["jobs"]) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    rows.sort(key=lambda r: (r["method"], r["scenario"], r["d"], r["seed"]))
    with (out / "bench.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BENCH_COLUMNS)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in BENCH_COLUMNS])
    echo_config(cfg, "bench", out)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"wrote {len(rows)} row(s) to {out / 'bench.csv'} ({failed} failed)")
    return 0


COMMANDS = {"gen": cmd_gen, "fit": cmd_fit, "predict": cmd_predict, "evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "gen" and cfg["scenario"] not in KINDS:
            parser.error(f"invalid scenario {cfg['scenario']!r}; choose from {', '.join(KINDS)}")
        return COMMANDS[args.command](cfg)
    except (CliError, DataError, ValueError, OSError) as exc:
        print(f"specseries {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
