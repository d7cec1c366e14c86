"""Spectral series conditional density estimator.

The estimate is ``f(z|x) = sum_{i<=I, j<=J} beta_ij phi_i(z) psi_j(x)`` where
``phi`` is an orthonormal basis in the response and ``psi`` are Nyström
extended eigenvectors of a kernel Gram matrix.  Coefficients are plain
empirical averages, so they are computed once per bandwidth and reused for
every cutoff pair during tuning.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import Dataset, Standardizer, ZTransform, fit_response_transform, rescale_response, standardize_covariates
from .kernel import KernelSpec, gram, out_of_sample_kernel, sq_distances
from .postprocess import cdf_rows, interp_rows, normalize_batch, postprocess_batch
from .spectral_basis import (
    SpectralBasis,
    basis_arrays,
    basis_from_arrays,
    eigendecompose,
    nystrom_eval_batch,
)
from .z_basis import FourierBasis, ZBasis, make_zbasis, zbasis_from_dict

logger = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
DEFAULT_DELTA_GRID = (0.0, 0.025, 0.05, 0.1)
TIE_RTOL = 1e-10


class EstimatorError(ValueError):
    pass


@dataclass
class CdeModel:
    basis: SpectralBasis
    zbasis: ZBasis
    beta: np.ndarray
    I: int
    J: int
    delta: float = 0.0
    z_transform: ZTransform = field(default_factory=ZTransform)
    n_grid: int = 1000
    standardizer: Standardizer | None = None

    def __post_init__(self):
        I_max, J_max = self.beta.shape
        if not (1 <= self.I <= I_max and 1 <= self.J <= J_max <= self.basis.J):
            raise EstimatorError(
                f"cutoffs (I={self.I}, J={self.J}) incompatible with beta {self.beta.shape} "
                f"and basis J={self.basis.J}")
        if not np.all(np.isfinite(self.beta)):
            raise EstimatorError("beta has non-finite entries")

    @property
    def epsilon(self) -> float:
        return self.basis.kernel_spec.epsilon

    @property
    def d(self) -> int:
        return self.basis.d

    def quadrature(self):
        return self.zbasis.quadrature(self.n_grid)

    @property
    def discrete(self) -> bool:
        return getattr(self.zbasis, "discrete", False)

    def prepare_X(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.d:
            raise EstimatorError(f"query dimension {X.shape[1]} does not match model dimension {self.d}")
        return X if self.standardizer is None else self.standardizer.apply(X)

    # -- protocol shared with baselines and oracles (unit response scale) --
    def density_grid(self, X, delta: float | None = None):
        nodes, w = self.quadrature()
        raw = raw_density_matrix(self, X, nodes, self.I, self.J)
        d = self.delta if delta is None else delta
        return nodes, w, postprocess_batch(raw, w, d)


# --- coefficients and evaluation ---------------------------------------------------

def _basis_values(basis: SpectralBasis, X, J: int) -> np.ndarray:
    """Nyström values, reusing in-sample eigenvectors when X are the first basis points."""
    X = np.asarray(X, dtype=float)
    n = X.shape[0]
    if n <= basis.n and np.array_equal(X, basis.points[:n]):
        return basis.in_sample_values()[:n, :J]
    return nystrom_eval_batch(basis, X, range(1, J + 1))


def fit_coefficients(train: Dataset, basis: SpectralBasis, zb: ZBasis, I_max: int, J_max: int,
                     psi: np.ndarray | None = None) -> np.ndarray:
    """``beta_ij = mean_k phi_i(z_k) psi_j(x_k)`` over the labeled training sample."""
    if train.z is None or not train.is_labeled:
        raise EstimatorError("training data must be fully labeled")
    if J_max > basis.J:
        raise EstimatorError(f"J_max={J_max} exceeds the {basis.J} available eigenfunctions")
    if psi is None:
        psi = _basis_values(basis, train.X, J_max)
    Phi = zb.evaluate(train.z, I_max)
    return Phi.T @ psi[:, :J_max] / train.n


def raw_density_matrix(model: CdeModel, X, z_nodes, I: int, J: int) -> np.ndarray:
    """Raw series values, shape ``(len(X), len(z_nodes))``."""
    _check_cutoffs(model, I, J)
    Xs = model.prepare_X(X)
    psi = nystrom_eval_batch(model.basis, Xs, range(1, J + 1))
    Phi = model.zbasis.evaluate(z_nodes, I)
    return (psi @ model.beta[:I, :J].T) @ Phi.T


def _check_cutoffs(model: CdeModel, I: int, J: int) -> None:
    I_max, J_max = model.beta.shape
    if not (1 <= I <= I_max and 1 <= J <= J_max):
        raise EstimatorError(f"cutoffs (I={I}, J={J}) outside 1..{I_max} x 1..{J_max}")


def eval_raw(model: CdeModel, x, z_nodes, I: int | None = None, J: int | None = None):
    from .postprocess import DensityGrid

    I = model.I if I is None else I
    J = model.J if J is None else J
    z_nodes = np.asarray(z_nodes, dtype=float)
    vals = raw_density_matrix(model, np.asarray(x, dtype=float)[None, :], z_nodes, I, J)[0]
    return DensityGrid(z_nodes, vals, raw=True)


def loss_table(beta: np.ndarray, Phi: np.ndarray, Psi: np.ndarray) -> np.ndarray:
    """Estimated loss for every cutoff prefix; entry ``[I-1, J-1]``.

    ``Phi`` (n', I_max) and ``Psi`` (n', J_max) hold basis values at the
    validation sample.  Uses ``sum_i beta_i W beta_i^T - 2 mean_k f(z_k|x_k)``
    with ``W = Psi^T Psi / n'``, accumulated over prefixes.
    """
    n_val = Phi.shape[0]
    I_max, J_max = beta.shape
    W = Psi.T @ Psi / n_val
    C = Phi.T @ Psi / n_val
    fit_term = np.cumsum(np.cumsum(beta * C, axis=0), axis=1)

    quad = np.zeros((I_max, J_max))
    q = np.zeros(I_max)
    for J in range(J_max):
        cross = beta[:, :J] @ W[:J, J] if J else np.zeros(I_max)
        q = q + 2.0 * beta[:, J] * cross + beta[:, J] ** 2 * W[J, J]
        quad[:, J] = q
    quad = np.cumsum(quad, axis=0)
    return quad - 2.0 * fit_term


def estimate_loss(model: CdeModel, eval_set: Dataset, I: int | None = None, J: int | None = None) -> float:
    """Estimated L2 loss of the raw series (up to an additive constant)."""
    if eval_set.n == 0:
        raise EstimatorError("evaluation set is empty")
    if not eval_set.is_labeled:
        raise EstimatorError("evaluation set must be labeled")
    I = model.I if I is None else I
    J = model.J if J is None else J
    _check_cutoffs(model, I, J)
    Psi = nystrom_eval_batch(model.basis, model.prepare_X(eval_set.X), range(1, J + 1))
    Phi = model.zbasis.evaluate(eval_set.z, I)
    B = model.beta[:I, :J]
    W = Psi.T @ Psi / eval_set.n
    quad = float(np.sum((B @ W) * B))
    fhat = np.einsum("ki,ij,kj->k", Phi, B, Psi)
    return quad - 2.0 * float(fhat.mean())


# --- tuning ------------------------------------------------------------------------------

def default_epsilon_grid(X, n_values: int = 10, span: float = 3.0, max_points: int = 1000, seed=0) -> np.ndarray:
    """Log grid around ``median pairwise squared distance / 8``."""
    X = np.asarray(X, dtype=float)
    if X.shape[0] > max_points:
        X = X[np.random.default_rng(seed).choice(X.shape[0], max_points, replace=False)]
    D = sq_distances(X, X)
    off = D[np.triu_indices_from(D, k=1)]
    med = float(np.median(off)) if off.size else 1.0
    if not med > 0:
        med = 1.0
    center = med / 8.0
    return center * 2.0 ** np.linspace(-span, span, n_values)


def default_i_grid() -> list[int]:
    return list(range(1, 31))


def default_j_grid(n: int) -> list[int]:
    return list(range(1, max(1, min(n // 2, 60)) + 1))


@dataclass
class TuneResult:
    model: CdeModel
    table: list[dict]
    timings: dict
    n_coefficient_fits: int
    best_loss: float


def _argmin_with_ties(candidates):
    """Candidates are ``(loss, eps, I, J)``; smallest loss, ties to smaller (eps, I, J)."""
    best = min(c[0] for c in candidates)
    tol = TIE_RTOL * max(1.0, abs(best))
    return min((c for c in candidates if c[0] <= best + tol), key=lambda c: (c[1], c[2], c[3]))


def tune(train: Dataset, val: Dataset, epsilon_grid, I_grid, J_grid, zb: ZBasis | None = None, *,
         normalization: str = "none", method: str = "dense", sparsity_threshold: float = 0.0,
         unlabeled: Dataset | None = None, oversampling: int = 10, power_iters: int = 2,
         seed=0, n_grid: int = 1000, standardizer: Standardizer | None = None) -> TuneResult:
    """Grid search over bandwidth and cutoffs minimizing the validation loss.

    For each bandwidth one Gram matrix, one eigendecomposition and one
    coefficient fit at ``(max I_grid, max J_grid)``; every cutoff pair then
    reuses those coefficients.
    """
    zb = FourierBasis() if zb is None else zb
    eps_grid = sorted(float(e) for e in epsilon_grid)
    I_grid = sorted(set(int(i) for i in I_grid))
    J_grid = sorted(set(int(j) for j in J_grid))
    if not eps_grid or not I_grid or not J_grid:
        raise EstimatorError("tuning grids must be nonempty")
    if not train.is_labeled or not val.is_labeled:
        raise EstimatorError("train and validation sets must be labeled")
    I_max, J_req = I_grid[-1], J_grid[-1]

    points = train.X if unlabeled is None or unlabeled.n == 0 else np.vstack([train.X, unlabeled.X])
    if J_req > points.shape[0]:
        raise EstimatorError(f"max J={J_req} exceeds the number of basis points {points.shape[0]}")
    Phi_val = zb.evaluate(val.z, I_max)

    timings = dict.fromkeys(("gram", "eigen", "coefficients", "nystrom", "loss"), 0.0)
    table: list[dict] = []
    candidates = []
    kept: dict[float, tuple] = {}
    n_fits = 0
    for eps in eps_grid:
        spec = KernelSpec(eps, normalization, sparsity_threshold)
        t = time.perf_counter()
        G = gram(points, spec)
        timings["gram"] += time.perf_counter() - t

        t = time.perf_counter()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            basis = eigendecompose(G, J_req, method, oversampling=oversampling,
                                   power_iters=power_iters, seed=seed)
        timings["eigen"] += time.perf_counter() - t
        del G
        J_avail = basis.J

        t = time.perf_counter()
        psi_train = basis.in_sample_values()[: train.n]
        beta = fit_coefficients(train, basis, zb, I_max, J_avail, psi=psi_train)
        n_fits += 1
        timings["coefficients"] += time.perf_counter() - t

        t = time.perf_counter()
        K_val = out_of_sample_kernel(basis.kernel_spec, val.X, basis.points, basis.degrees)
        timings["gram"] += time.perf_counter() - t
        t = time.perf_counter()
        Psi_val = (K_val @ basis.eigenvectors) * (np.sqrt(basis.n) / basis.eigenvalues)
        del K_val
        timings["nystrom"] += time.perf_counter() - t

        t = time.perf_counter()
        L = loss_table(beta, Phi_val, Psi_val)
        for I in I_grid:
            for J in J_grid:
                loss = float(L[I - 1, J - 1]) if J <= J_avail else float("nan")
                table.append({"epsilon": eps, "I": I, "J": J, "loss": loss})
                if J <= J_avail and np.isfinite(loss):
                    candidates.append((loss, eps, I, J))
        timings["loss"] += time.perf_counter() - t
        best = _argmin_with_ties(candidates) if candidates else None
        if best is not None and best[1] == eps:
            kept = {eps: (basis, beta)}

    if not candidates:
        raise EstimatorError("no admissible tuning configuration")
    loss, eps, I, J = _argmin_with_ties(candidates)
    basis, beta = kept[eps]
    model = CdeModel(basis, zb, beta, I, J, 0.0, train.z_transform, n_grid, standardizer)
    return TuneResult(model, table, timings, n_fits, loss)


def postprocessed_loss_terms(model: CdeModel, X, z, delta: float | None = None, raw=None):
    """Per-point ``int f~^2 dz`` and ``f~(z_k | x_k)`` for post-processed estimates."""
    nodes, w = model.quadrature()
    if raw is None:
        raw = raw_density_matrix(model, X, nodes, model.I, model.J)
    D = postprocess_batch(raw, w, model.delta if delta is None else delta)
    return (D ** 2) @ w, interp_rows(nodes, D, z, model.discrete)


def tune_delta(model: CdeModel, val: Dataset, delta_grid=DEFAULT_DELTA_GRID):
    """Pick the bump threshold minimizing the post-processed validation loss.

    Returns ``(delta*, {delta: loss})``.
    """
    grid = sorted(float(d) for d in delta_grid)
    if not grid:
        raise EstimatorError("delta grid must be nonempty")
    nodes, w = model.quadrature()
    raw = raw_density_matrix(model, val.X, nodes, model.I, model.J)
    losses = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for d in grid:
            a, b = postprocessed_loss_terms(model, val.X, val.z, d, raw=raw)
            losses[d] = float(a.mean() - 2.0 * b.mean())
    best = min(losses.values())
    tol = TIE_RTOL * max(1.0, abs(best))
    delta = min(d for d, v in losses.items() if v <= best + tol)
    return delta, losses


def predict_density(model: CdeModel, X, delta: float | None = None):
    """Post-processed densities on the model grid (unit response scale)."""
    return model.density_grid(X, delta)


def predict_cdf(model: CdeModel, x, z) -> np.ndarray:
    """Conditional CDF of each row of ``x`` at the matching ``z`` (unit scale)."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    nodes, w, D = model.density_grid(X)
    return cdf_rows(nodes, D, w, z, model.discrete)


# --- serialization ----------------------------------------------------------------------

def model_arrays(model: CdeModel) -> dict:
    meta = {
        "version": MODEL_FORMAT_VERSION, "I": model.I, "J": model.J, "delta": model.delta,
        "n_grid": model.n_grid, "z_offset": model.z_transform.offset, "z_scale": model.z_transform.scale,
        "zbasis": model.zbasis.to_dict(), "standardized": model.standardizer is not None,
    }
    arrs = basis_arrays(model.basis)
    arrs["model_meta"] = np.array(json.dumps(meta))
    arrs["beta"] = model.beta
    if model.standardizer is not None:
        arrs["x_mean"] = model.standardizer.mean
        arrs["x_scale"] = model.standardizer.scale
    return arrs


def save_model(model: CdeModel, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, kind=np.array("series"), **model_arrays(model))


def model_from_arrays(arrs) -> CdeModel:
    meta = json.loads(str(arrs["model_meta"]))
    if meta.get("version") != MODEL_FORMAT_VERSION:
        raise EstimatorError(f"unsupported model format version {meta.get('version')}")
    st = Standardizer(np.array(arrs["x_mean"]), np.array(arrs["x_scale"])) if meta["standardized"] else None
    return CdeModel(basis_from_arrays(arrs), zbasis_from_dict(meta["zbasis"]), np.array(arrs["beta"]),
                    meta["I"], meta["J"], meta["delta"], ZTransform(meta["z_offset"], meta["z_scale"]),
                    meta["n_grid"], st)


def load_model(path) -> CdeModel:
    with np.load(path, allow_pickle=False) as arrs:
        return model_from_arrays(arrs)


# --- scikit-learn style estimator ---------------------------------------------------------

class SpectralSeriesCDE(BaseEstimator):
    """Spectral series conditional density estimator.

    Parameters
    ----------
    epsilon_grid, i_grid, j_grid : sequences or None
        Tuning grids for the kernel bandwidth and the response / covariate
        cutoffs. ``None`` selects data-driven defaults.
    delta_grid : sequence of float
        Candidate bump-removal thresholds, tuned after the other parameters.
    normalization : {"none", "diffusion", "density_renormalized"}
    method : {"dense", "randomized"}
        Eigensolver.
    sparsity_threshold : float
        Raw kernel values below this are set to zero.
    z_basis : {"fourier", "indicator"}
    n_grid : int
        Number of response grid nodes used for post-processing.
    validation_fraction : float
        Share of the data held out for tuning when ``fit`` gets no explicit
        validation set.
    standardize : bool
        Standardize covariates before building the kernel.
    random_state : int
    """

    def __init__(self, epsilon_grid=None, i_grid=None, j_grid=None, delta_grid=DEFAULT_DELTA_GRID,
                 normalization="none", method="dense", oversampling=10, power_iters=2,
                 sparsity_threshold=0.0, z_basis="fourier", n_grid=1000, validation_fraction=0.15 / 0.85,
                 standardize=False, random_state=0):
        self.epsilon_grid = epsilon_grid
        self.i_grid = i_grid
        self.j_grid = j_grid
        self.delta_grid = delta_grid
        self.normalization = normalization
        self.method = method
        self.oversampling = oversampling
        self.power_iters = power_iters
        self.sparsity_threshold = sparsity_threshold
        self.z_basis = z_basis
        self.n_grid = n_grid
        self.validation_fraction = validation_fraction
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None, X_unlabeled=None):
        X, y = check_X_y(X, y, y_numeric=True)
        if X_val is None:
            rng = np.random.default_rng(self.random_state)
            perm = rng.permutation(X.shape[0])
            n_val = max(1, int(np.floor(X.shape[0] * self.validation_fraction)))
            X_val, y_val = X[perm[:n_val]], y[perm[:n_val]]
            X, y = X[perm[n_val:]], y[perm[n_val:]]
        else:
            X_val, y_val = check_X_y(X_val, y_val, y_numeric=True)
        train = Dataset(X, y)
        tf = fit_response_transform(train)
        train = rescale_response(train, tf)
        val = rescale_response(Dataset(X_val, y_val), tf)
        unl = None if X_unlabeled is None else Dataset(check_array(X_unlabeled))

        st = None
        if self.standardize:
            train, st = standardize_covariates(train, constant="keep")
            val = replace(val, X=st.apply(val.X))
            if unl is not None:
                unl = Dataset(st.apply(unl.X))

        n_basis_points = train.n + (0 if unl is None else unl.n)
        eps_grid = self.epsilon_grid if self.epsilon_grid is not None else default_epsilon_grid(
            train.X if unl is None else np.vstack([train.X, unl.X]), seed=self.random_state)
        i_grid = self.i_grid if self.i_grid is not None else default_i_grid()
        j_grid = self.j_grid if self.j_grid is not None else default_j_grid(n_basis_points)
        zb = make_zbasis(self.z_basis, train.raw_z(), tf.offset, tf.scale)
        if zb.max_index is not None:
            i_grid = [i for i in i_grid if i <= zb.max_index] or [zb.max_index]

        res = tune(train, val, eps_grid, i_grid, j_grid, zb, normalization=self.normalization,
                   method=self.method, sparsity_threshold=self.sparsity_threshold, unlabeled=unl,
                   oversampling=self.oversampling, power_iters=self.power_iters,
                   seed=self.random_state, n_grid=self.n_grid, standardizer=None)
        model = res.model
        t = time.perf_counter()
        delta, delta_losses = tune_delta(model, val, self.delta_grid)
        res.timings["delta"] = time.perf_counter() - t
        model.delta = delta
        model.standardizer = st

        self.model_ = model
        self.z_transform_ = tf
        self.epsilon_ = model.epsilon
        self.I_ = model.I
        self.J_ = model.J
        self.delta_ = delta
        self.tuning_table_ = res.table
        self.delta_losses_ = delta_losses
        self.validation_loss_ = res.best_loss
        self.timings_ = res.timings
        self.n_coefficient_fits_ = res.n_coefficient_fits
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def z_grid_(self) -> np.ndarray:
        nodes, _ = self.model_.quadrature()
        return self.z_transform_.inverse(nodes)

    def density_grid(self, X, delta=None):
        """Unit-scale grid densities ``(nodes, weights, values)``."""
        check_is_fitted(self, "model_")
        return self.model_.density_grid(check_array(X), delta)

    def predict_density(self, X):
        """Post-processed densities on the original response scale.

        Returns ``(z_grid, densities)`` with ``densities`` of shape
        ``(n_samples, n_grid)``.
        """
        nodes, _, D = self.density_grid(X)
        if self.model_.discrete:
            return self.z_transform_.inverse(nodes), D
        return self.z_transform_.inverse(nodes), D / self.z_transform_.scale

    def predict(self, X):
        """Densities on ``z_grid_``; see :meth:`predict_density`."""
        return self.predict_density(X)[1]

    def predict_cdf(self, X, y):
        check_is_fitted(self, "model_")
        X = check_array(X)
        u = np.clip(self.z_transform_.forward(y), 0.0, 1.0)
        return predict_cdf(self.model_, X, u)

    def score(self, X, y):
        """Negative post-processed loss on ``(X, y)`` (higher is better)."""
        from .evaluation import test_loss

        check_is_fitted(self, "model_")
        test = rescale_response(Dataset(check_array(X), np.asarray(y, dtype=float)), self.z_transform_)
        return -test_loss(self.model_, test)
