"""Reference conditional density estimators: kernel nearest neighbours and a KDE ratio.

Both produce densities on an equispaced grid over the unit response interval,
as mixtures ``sum_k w_k(x) N(z; z_k, bw^2)`` renormalized on [0, 1], so a
prediction is a row-weight matrix times a fixed bump matrix.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataset import Dataset, Standardizer, fit_response_transform, rescale_response, standardize_covariates
from .evaluation import loss_from_contributions
from .kernel import sq_distances
from .postprocess import interp_rows
from .z_basis import trapezoid_weights

logger = logging.getLogger(__name__)

_LOG_TINY = math.log(1e-300)


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class KnnCdeSpec:
    N: int
    eps_z: float

    def __post_init__(self):
        if self.N < 1:
            raise BaselineError("N must be at least 1")
        if not self.eps_z > 0:
            raise BaselineError("eps_z must be positive")


@dataclass(frozen=True)
class KdeCdeSpec:
    h: float
    h_z: float

    def __post_init__(self):
        if not (self.h > 0 and self.h_z > 0):
            raise BaselineError("bandwidths must be positive")


def unit_grid(n_grid: int = 1000):
    nodes = np.linspace(0.0, 1.0, n_grid)
    return nodes, trapezoid_weights(nodes)


def bump_matrix(z_train, z_nodes, bw: float) -> np.ndarray:
    """``N(z_g; z_k, bw^2)`` with shape ``(n_train, G)``."""
    diff = np.asarray(z_nodes)[None, :] - np.asarray(z_train)[:, None]
    return np.exp(-0.5 * (diff / bw) ** 2) / (bw * math.sqrt(2.0 * math.pi))


def _renormalize(D: np.ndarray, w: np.ndarray) -> np.ndarray:
    mass = D @ w
    bad = ~(mass > 0)
    if bad.any():
        warnings.warn(f"{int(bad.sum())} baseline density row(s) vanish on the grid; using uniform",
                      RuntimeWarning, stacklevel=3)
        D[bad] = 1.0
        mass[bad] = w.sum()
    return D / mass[:, None]


def knn_weights(X_train, X_query, N: int) -> np.ndarray:
    """Row weights ``1/N`` on the ``N`` nearest training points (ties by index)."""
    n = X_train.shape[0]
    if not 1 <= N <= n:
        raise BaselineError(f"N={N} must lie in [1, {n}]")
    D2 = sq_distances(X_query, X_train)
    idx = np.argsort(D2, axis=1, kind="stable")[:, :N]
    W = np.zeros_like(D2)
    np.put_along_axis(W, idx, 1.0 / N, axis=1)
    return W


def kde_weights(X_train, X_query, h: float):
    """Normalized Gaussian weights and ``log f(x)`` of the product-Gaussian KDE."""
    n, d = X_train.shape
    logk = -sq_distances(X_query, X_train) / (2.0 * h * h)
    lse = logsumexp(logk, axis=1)
    log_fx = lse - math.log(n) - 0.5 * d * math.log(2.0 * math.pi * h * h)
    return np.exp(logk - lse[:, None]), log_fx


def _mixture(W, z_train, z_nodes, w, bw):
    return _renormalize(W @ bump_matrix(z_train, z_nodes, bw), w)


def knn_cde(train: Dataset, spec: KnnCdeSpec, x, z_nodes) -> np.ndarray:
    """KNN conditional densities at each row of ``x`` on ``z_nodes``."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    z_nodes = np.asarray(z_nodes, dtype=float)
    W = knn_weights(train.X, X, spec.N)
    return _mixture(W, train.z, z_nodes, trapezoid_weights(z_nodes), spec.eps_z)


def kde_cde(train: Dataset, spec: KdeCdeSpec, x, z_nodes) -> np.ndarray:
    """Ratio ``f(z, x) / f(x)`` of Gaussian KDEs; ``train`` covariates already standardized."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    z_nodes = np.asarray(z_nodes, dtype=float)
    W, log_fx = kde_weights(train.X, X, spec.h)
    w = trapezoid_weights(z_nodes)
    D = _mixture(W, train.z, z_nodes, w, spec.h_z)
    tiny = log_fx < _LOG_TINY
    if tiny.any():
        warnings.warn(f"covariate density below 1e-300 at {int(tiny.sum())} point(s); using uniform",
                      RuntimeWarning, stacklevel=2)
        D[tiny] = 1.0 / w.sum()
    return D


def _grid_loss(D, nodes, w, z_val) -> float:
    return loss_from_contributions((D ** 2) @ w, interp_rows(nodes, D, z_val))


def tune_baseline(train: Dataset, val: Dataset, grid, n_grid: int = 1000):
    """Grid argmin of the estimated validation loss.

    ``grid`` is a sequence of :class:`KnnCdeSpec` or :class:`KdeCdeSpec`
    (not mixed).  Returns ``(spec, {spec: loss})``; ties go to the earlier spec.
    """
    grid = list(grid)
    if not grid:
        raise BaselineError("baseline grid is empty")
    kinds = {type(s) for s in grid}
    if len(kinds) != 1:
        raise BaselineError("grid mixes baseline kinds")
    nodes, w = unit_grid(n_grid)
    losses = {}
    weights_cache: dict = {}
    bumps_cache: dict = {}
    for s in grid:
        if isinstance(s, KnnCdeSpec):
            key, bw = ("N", s.N), s.eps_z
            if key not in weights_cache:
                weights_cache[key] = knn_weights(train.X, val.X, s.N)
            fallback = None
        else:
            key, bw = ("h", s.h), s.h_z
            if key not in weights_cache:
                weights_cache[key] = kde_weights(train.X, val.X, s.h)
            fallback = weights_cache[key][1] < _LOG_TINY
        W = weights_cache[key] if fallback is None else weights_cache[key][0]
        if bw not in bumps_cache:
            bumps_cache[bw] = bump_matrix(train.z, nodes, bw)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            D = _renormalize(W @ bumps_cache[bw], w)
        if fallback is not None and fallback.any():
            D[fallback] = 1.0 / w.sum()
        losses[s] = _grid_loss(D, nodes, w, val.z)
    best = min(losses.values())
    spec = next(s for s in grid if losses[s] == best)
    return spec, losses


def silverman_z(z) -> float:
    z = np.asarray(z, dtype=float)
    sd = float(np.std(z, ddof=1)) if z.size > 1 else 0.0
    sd = sd if sd > 0 else 0.1
    return 1.06 * sd * z.size ** (-0.2)


def silverman_x(n: int, d: int) -> float:
    return (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4))


def knn_grid(n: int, z, n_bw: int = 6):
    Ns = [2 ** k for k in range(0, int(math.log2(max(1, n))) + 1)]
    pilot = silverman_z(z)
    bws = pilot * 2.0 ** np.linspace(-2.0, 2.0, n_bw)
    return [KnnCdeSpec(N, float(b)) for N in Ns for b in bws]


def kde_grid(n: int, d: int, z, n_h: int = 7, n_hz: int = 6):
    hs = silverman_x(n, d) * 2.0 ** np.linspace(-2.0, 1.0, n_h)
    hzs = silverman_z(z) * 2.0 ** np.linspace(-2.0, 2.0, n_hz)
    return [KdeCdeSpec(float(h), float(hz)) for h in hs for hz in hzs]


# --- fitted models following the evaluation protocol --------------------------------------

class BaselineModel:
    """Tuned baseline on the unit response scale; implements ``density_grid``."""

    discrete = False

    def __init__(self, train: Dataset, spec, n_grid: int = 1000, standardizer: Standardizer | None = None):
        self.train = train
        self.spec = spec
        self.n_grid = n_grid
        self.standardizer = standardizer

    def density_grid(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.train.d:
            raise BaselineError(f"query dimension {X.shape[1]} does not match {self.train.d}")
        if self.standardizer is not None:
            X = self.standardizer.apply(X)
        nodes, w = unit_grid(self.n_grid)
        if isinstance(self.spec, KnnCdeSpec):
            return nodes, w, knn_cde(self.train, self.spec, X, nodes)
        return nodes, w, kde_cde(self.train, self.spec, X, nodes)


def fit_knn(train: Dataset, val: Dataset, grid=None, n_grid: int = 1000) -> BaselineModel:
    grid = knn_grid(train.n, train.z) if grid is None else grid
    spec, _ = tune_baseline(train, val, grid, n_grid)
    return BaselineModel(train, spec, n_grid)


def fit_kde(train: Dataset, val: Dataset, grid=None, n_grid: int = 1000) -> BaselineModel:
    """Standardizes covariates on ``train`` (zero-variance coordinates kept unscaled)."""
    train_s, st = standardize_covariates(train, constant="keep")
    val_s = Dataset(st.apply(val.X), val.z, val.z_transform)
    grid = kde_grid(train.n, train.d, train.z) if grid is None else grid
    spec, _ = tune_baseline(train_s, val_s, grid, n_grid)
    return BaselineModel(train_s, spec, n_grid, st)


class _BaselineCDE(BaseEstimator):
    def _prepare(self, X, y, X_val, y_val):
        X, y = check_X_y(X, y, y_numeric=True)
        if X_val is None:
            perm = np.random.default_rng(self.random_state).permutation(X.shape[0])
            n_val = max(1, int(np.floor(X.shape[0] * self.validation_fraction)))
            X_val, y_val = X[perm[:n_val]], y[perm[:n_val]]
            X, y = X[perm[n_val:]], y[perm[n_val:]]
        else:
            X_val, y_val = check_X_y(X_val, y_val, y_numeric=True)
        train = Dataset(X, y)
        tf = fit_response_transform(train)
        self.z_transform_ = tf
        self.n_features_in_ = X.shape[1]
        return rescale_response(train, tf), rescale_response(Dataset(X_val, y_val), tf)

    def density_grid(self, X):
        check_is_fitted(self, "model_")
        return self.model_.density_grid(check_array(X))

    def predict_density(self, X):
        nodes, _, D = self.density_grid(X)
        return self.z_transform_.inverse(nodes), D / self.z_transform_.scale

    def predict(self, X):
        return self.predict_density(X)[1]


class KNNCDE(_BaselineCDE):
    """Kernel nearest-neighbour conditional density estimator.

    Parameters
    ----------
    grid : sequence of KnnCdeSpec or None
        Candidate ``(N, eps_z)`` pairs (``eps_z`` on the unit response scale).
        ``None`` uses powers of two for ``N`` and a log grid around a
        Silverman pilot for ``eps_z``.
    """

    def __init__(self, grid=None, n_grid=1000, validation_fraction=0.15 / 0.85, random_state=0):
        self.grid = grid
        self.n_grid = n_grid
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        train, val = self._prepare(X, y, X_val, y_val)
        self.model_ = fit_knn(train, val, self.grid, self.n_grid)
        self.spec_ = self.model_.spec
        return self


class KDECDE(_BaselineCDE):
    """Ratio-of-KDEs conditional density estimator with one shared covariate bandwidth."""

    def __init__(self, grid=None, n_grid=1000, validation_fraction=0.15 / 0.85, random_state=0):
        self.grid = grid
        self.n_grid = n_grid
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        train, val = self._prepare(X, y, X_val, y_val)
        self.model_ = fit_kde(train, val, self.grid, self.n_grid)
        self.spec_ = self.model_.spec
        return self
