"""Simulated scenarios with known Gaussian conditional densities.

* ``manifold``: ``theta ~ Unif(0, 2 pi)``, ``x = (cos theta, sin theta, 0, ...)``,
  ``Z | x ~ N(theta, sigma2)``.  With ``intrinsic_dim = p > 1`` the covariates
  lie on a p-torus (p circles in the first 2p coordinates) and the mean is the
  average angle.
* ``one_relevant``: ``X ~ N(0, I_d)``, ``Z | x ~ N((x_1 + ... + x_r) / sqrt(r), sigma2)``
  with ``r = n_relevant`` (default 1).
* ``non_sparse``: ``X ~ N(0, I_d)``, ``Z | x ~ N(mean(x), sigma2)``.

``sigma2`` is a variance.  ``rotate=True`` applies a fixed random orthogonal
matrix (drawn from the seed) to the covariates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .dataset import Dataset, ZTransform
from .z_basis import trapezoid_weights

KINDS = ("manifold", "one_relevant", "non_sparse")
_CIRCLE_TOL = 1e-8


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class Scenario:
    kind: str
    d: int
    sigma2: float = 0.5
    seed: int = 0
    rotate: bool = False
    intrinsic_dim: int = 1
    n_relevant: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario {self.kind!r}; choose from {', '.join(KINDS)}")
        if not self.sigma2 > 0:
            raise ScenarioError("sigma2 must be positive")
        if self.kind == "manifold" and self.d < 2 * self.intrinsic_dim:
            raise ScenarioError(f"manifold with intrinsic dimension {self.intrinsic_dim} needs d >= {2 * self.intrinsic_dim}")
        if self.d < 1:
            raise ScenarioError("d must be at least 1")
        if not 1 <= self.n_relevant <= self.d:
            raise ScenarioError("n_relevant must lie in [1, d]")

    @property
    def sd(self) -> float:
        return math.sqrt(self.sigma2)

    def rotation(self) -> np.ndarray | None:
        if not self.rotate:
            return None
        rng = np.random.default_rng([self.seed, 0x5EED])
        Q, R = np.linalg.qr(rng.standard_normal((self.d, self.d)))
        return Q * np.sign(np.diag(R))


def generate(sc: Scenario, n: int) -> Dataset:
    """Draw ``n`` labeled samples (raw response scale)."""
    if n < 1:
        raise ScenarioError("n must be at least 1")
    rng = np.random.default_rng(sc.seed)
    if sc.kind == "manifold":
        p = sc.intrinsic_dim
        theta = rng.uniform(0.0, 2.0 * np.pi, size=(n, p))
        X = np.zeros((n, sc.d))
        X[:, 0:2 * p:2] = np.cos(theta)
        X[:, 1:2 * p:2] = np.sin(theta)
    else:
        X = rng.standard_normal((n, sc.d))
    mu = _mean(sc, X)
    z = mu + sc.sd * rng.standard_normal(n)
    Q = sc.rotation()
    if Q is not None:
        X = X @ Q.T
    return Dataset(X, z)


def _mean(sc: Scenario, X: np.ndarray) -> np.ndarray:
    """Conditional mean for unrotated covariates."""
    if sc.kind == "one_relevant":
        r = sc.n_relevant
        return X[:, :r].sum(axis=1) / math.sqrt(r)
    if sc.kind == "non_sparse":
        return X.mean(axis=1)
    p = sc.intrinsic_dim
    c, s = X[:, 0:2 * p:2], X[:, 1:2 * p:2]
    radius = np.hypot(c, s)
    off = np.abs(radius - 1.0).max(axis=1) > _CIRCLE_TOL
    if p * 2 < X.shape[1]:
        off |= np.abs(X[:, 2 * p:]).max(axis=1) > _CIRCLE_TOL
    if off.any():
        raise ScenarioError(f"point {int(np.argmax(off))} is not on the manifold")
    theta = np.mod(np.arctan2(s, c), 2.0 * np.pi)
    return theta.mean(axis=1)


def conditional_mean(sc: Scenario, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != sc.d:
        raise ScenarioError(f"x has dimension {X.shape[1]}, scenario has {sc.d}")
    Q = sc.rotation()
    return _mean(sc, X if Q is None else X @ Q)


def true_density(sc: Scenario, x, z_raw) -> np.ndarray:
    """``f(z | x)`` on the raw response scale, shape ``(len(x), len(z_raw))``."""
    mu = conditional_mean(sc, x)
    z = np.atleast_1d(np.asarray(z_raw, dtype=float))
    return norm.pdf(z[None, :], loc=mu[:, None], scale=sc.sd)


def true_cdf(sc: Scenario, x, z_raw) -> np.ndarray:
    """``F(z_k | x_k)`` elementwise."""
    return norm.cdf(np.asarray(z_raw, dtype=float), loc=conditional_mean(sc, x), scale=sc.sd)


class TrueDensityModel:
    """The true conditional density seen on the unit response scale.

    ``f_unit(u | x) = scale * f(offset + scale * u | x)``.  Mass outside the
    transform's range is not folded back in.
    """

    discrete = False

    def __init__(self, sc: Scenario, z_transform: ZTransform = ZTransform(), n_grid: int = 1000):
        self.scenario = sc
        self.z_transform = z_transform
        self.n_grid = n_grid

    def density_grid(self, X):
        nodes = np.linspace(0.0, 1.0, self.n_grid)
        vals = true_density(self.scenario, X, self.z_transform.inverse(nodes)) * self.z_transform.scale
        return nodes, trapezoid_weights(nodes), vals

    def density(self, X, u) -> np.ndarray:
        """Elementwise ``f_unit(u_k | x_k)``."""
        mu = conditional_mean(self.scenario, X)
        z = self.z_transform.inverse(u)
        return norm.pdf(z, loc=mu, scale=self.scenario.sd) * self.z_transform.scale

    def cdf(self, X, u) -> np.ndarray:
        """Exact conditional CDF at unit-scale responses."""
        return true_cdf(self.scenario, X, self.z_transform.inverse(u))
