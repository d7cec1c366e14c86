"""Turning raw series estimates on a grid into bona fide densities.

All batch routines take ``values`` of shape ``(m, G)`` (one row per query
point) together with quadrature ``weights`` of shape ``(G,)``; integrals are
``values @ weights``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np

from .z_basis import trapezoid_weights

logger = logging.getLogger(__name__)

BISECTION_ITERS = 60


@dataclass(frozen=True)
class DensityGrid:
    """Density values on increasing ``z_nodes`` with quadrature ``weights``.

    ``raw`` marks unprocessed series output (may be negative). ``discrete``
    grids carry a probability mass function with unit weights.
    """

    z_nodes: np.ndarray
    values: np.ndarray
    weights: np.ndarray | None = None
    raw: bool = False
    discrete: bool = False
    shift: float = 0.0

    def __post_init__(self):
        if self.weights is None:
            object.__setattr__(self, "weights", trapezoid_weights(self.z_nodes))

    def integral(self) -> float:
        return float(self.values @ self.weights)


def normalize_batch(values, weights, return_shift: bool = False):
    """Row-wise projection onto bona fide densities.

    With ``f+ = max(f, 0)``: rows with ``int f+ >= 1`` become ``max(f - xi, 0)``
    where ``xi`` is found by bisection so the integral is one; rows with
    ``0 < int f+ < 1`` are rescaled; rows that are nowhere positive fall back
    to the uniform density.
    """
    V = np.atleast_2d(np.asarray(values, dtype=float))
    w = np.asarray(weights, dtype=float)
    pos = np.maximum(V, 0.0)
    mass = pos @ w
    out = np.empty_like(V)
    shift = np.zeros(V.shape[0])

    dead = ~(mass > 0)
    if dead.any():
        warnings.warn(f"{int(dead.sum())} density row(s) are nowhere positive; using uniform",
                      RuntimeWarning, stacklevel=2)
        out[dead] = 1.0 / w.sum()

    small = (mass > 0) & (mass < 1)
    out[small] = pos[small] / mass[small, None]

    big = mass >= 1
    if big.any():
        B = V[big]
        lo = np.zeros(B.shape[0])
        hi = B.max(axis=1)
        for _ in range(BISECTION_ITERS):
            mid = 0.5 * (lo + hi)
            m = np.maximum(B - mid[:, None], 0.0) @ w
            above = m > 1
            lo = np.where(above, mid, lo)
            hi = np.where(above, hi, mid)
        xi = 0.5 * (lo + hi)
        # an input that is already a density keeps xi = 0 exactly
        xi = np.where(mass[big] == 1, 0.0, xi)
        out[big] = np.maximum(B - xi[:, None], 0.0)
        shift[big] = xi
    if return_shift:
        return out, shift
    return out


def normalize(raw: DensityGrid) -> DensityGrid:
    if raw.z_nodes.size < 2 and not raw.discrete:
        raise ValueError("need at least two grid nodes")
    vals, shift = normalize_batch(raw.values[None, :], raw.weights, return_shift=True)
    return replace(raw, values=vals[0], raw=False, shift=float(shift[0]))


def remove_bumps_batch(values, weights, delta: float):
    """Zero every bump (maximal run of positive nodes) with mass below ``delta``.

    Rows where something was removed are renormalized; rows where every bump
    would vanish are returned unchanged.
    """
    if not 0 <= delta < 1:
        raise ValueError(f"delta must lie in [0, 1), got {delta}")
    V = np.atleast_2d(np.asarray(values, dtype=float))
    if delta == 0:
        return V.copy()
    w = np.asarray(weights, dtype=float)
    m, G = V.shape
    pos = V > 0
    starts = pos.copy()
    starts[:, 1:] &= ~pos[:, :-1]
    labels = np.cumsum(starts.ravel()).reshape(m, G) * pos
    nlab = int(labels.max()) + 1
    bump_mass = np.bincount(labels.ravel(), weights=(V * w).ravel(), minlength=nlab)
    kill_label = bump_mass < delta
    kill_label[0] = False
    kill = kill_label[labels]
    out = np.where(kill, 0.0, V)

    removed = kill.any(axis=1)
    emptied = removed & ~(out > 0).any(axis=1)
    if emptied.any():
        warnings.warn(f"bump removal would erase {int(emptied.sum())} density row(s); kept unchanged",
                      RuntimeWarning, stacklevel=2)
        out[emptied] = V[emptied]
    redo = removed & ~emptied
    if redo.any():
        out[redo] = normalize_batch(out[redo], w)
    return out


def remove_bumps(density: DensityGrid, delta: float) -> DensityGrid:
    vals = remove_bumps_batch(density.values[None, :], density.weights, delta)[0]
    return replace(density, values=vals)


def postprocess_batch(raw_values, weights, delta: float = 0.0):
    return remove_bumps_batch(normalize_batch(raw_values, weights), weights, delta)


def interp_rows(nodes, values, z, discrete: bool = False) -> np.ndarray:
    """Evaluate row ``k`` of ``values`` at ``z[k]``."""
    V = np.atleast_2d(values)
    z = np.asarray(z, dtype=float).ravel()
    nodes = np.asarray(nodes, dtype=float)
    rows = np.arange(V.shape[0])
    if discrete:
        idx = np.abs(z[:, None] - nodes[None, :]).argmin(axis=1)
        return V[rows, idx]
    idx = np.clip(np.searchsorted(nodes, z, side="right") - 1, 0, nodes.size - 2)
    t = (z - nodes[idx]) / (nodes[idx + 1] - nodes[idx])
    t = np.clip(t, 0.0, 1.0)
    return (1 - t) * V[rows, idx] + t * V[rows, idx + 1]


def cdf_rows(nodes, values, weights, z, discrete: bool = False) -> np.ndarray:
    """CDF of row ``k`` at ``z[k]``: trapezoid cumulative integral, linearly interpolated.

    The cumulative integral is divided by its final value so ``F(max node) = 1``.
    """
    V = np.atleast_2d(values)
    z = np.asarray(z, dtype=float).ravel()
    nodes = np.asarray(nodes, dtype=float)
    if discrete:
        C = np.cumsum(V * weights, axis=1)
        C = C / C[:, -1:]
        idx = np.searchsorted(nodes, z + 1e-12, side="right") - 1
        rows = np.arange(V.shape[0])
        return np.where(idx >= 0, C[rows, np.maximum(idx, 0)], 0.0)
    h = np.diff(nodes)
    C = np.zeros_like(V)
    C[:, 1:] = np.cumsum(0.5 * (V[:, 1:] + V[:, :-1]) * h, axis=1)
    C = C / C[:, -1:]
    F = interp_rows(nodes, C, z)
    F = np.where(z <= nodes[0], 0.0, F)
    return np.where(z >= nodes[-1], 1.0, F)
