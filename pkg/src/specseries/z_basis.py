"""Orthonormal bases on the response domain.

Two families are provided: the real trigonometric system on [0, 1] and
indicator bins for discrete or binned labels.  Every basis exposes
``evaluate(z, I)`` returning the first ``I`` functions as columns and a
``quadrature`` rule matching its inner product, so estimator code never needs
to know which family it is working with.
"""

from __future__ import annotations

import math

import numpy as np

SQRT2 = math.sqrt(2.0)
_DOMAIN_TOL = 1e-9


class ZBasisError(ValueError):
    pass


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=float)
    w = np.zeros_like(nodes)
    if nodes.size < 2:
        return w
    h = np.diff(nodes)
    w[:-1] += h / 2
    w[1:] += h / 2
    return w


class ZBasis:
    kind = "abstract"
    inner_product = "lebesgue"
    max_index: int | None = None
    sup_norm: float = math.inf

    def evaluate(self, z, I: int) -> np.ndarray:
        raise NotImplementedError

    def check_index(self, I: int) -> None:
        if I < 1:
            raise ZBasisError(f"basis index must be >= 1, got {I}")
        if self.max_index is not None and I > self.max_index:
            raise ZBasisError(f"basis has only {self.max_index} functions, asked for {I}")

    def quadrature(self, n_nodes: int = 1000) -> tuple[np.ndarray, np.ndarray]:
        nodes = np.linspace(0.0, 1.0, n_nodes)
        return nodes, trapezoid_weights(nodes)

    def to_dict(self) -> dict:
        return {"kind": self.kind}


class FourierBasis(ZBasis):
    """``1, sqrt2 cos(2 pi k z), sqrt2 sin(2 pi k z), ...`` on [0, 1]."""

    kind = "fourier"
    sup_norm = SQRT2

    def evaluate(self, z, I: int) -> np.ndarray:
        self.check_index(I)
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if z.size and (z.min() < -_DOMAIN_TOL or z.max() > 1 + _DOMAIN_TOL):
            raise ZBasisError("Fourier basis is defined on [0, 1]")
        out = np.empty((z.size, I))
        out[:, 0] = 1.0
        k = np.arange(1, I // 2 + 1)
        arg = 2.0 * np.pi * np.outer(z, k)
        out[:, 1::2] = SQRT2 * np.cos(arg)[:, : out[:, 1::2].shape[1]]
        out[:, 2::2] = SQRT2 * np.sin(arg)[:, : out[:, 2::2].shape[1]]
        return out

    def __eq__(self, other):
        return isinstance(other, FourierBasis)

    def __hash__(self):
        return hash(self.kind)


class IndicatorBasis(ZBasis):
    """Indicator bins centred on integer labels.

    Responses handled by the estimator live on [0, 1]; ``offset`` and
    ``scale`` map them back to the label scale (``label = offset + scale*z``).

    Continuous form: bin ``i`` is ``[label_i - 1/2, label_i + 1/2)`` on the
    label scale, which has width ``1/scale`` on [0, 1], so the functions are
    multiplied by ``sqrt(scale)`` to be orthonormal under Lebesgue measure.

    Discrete form: ``phi_i(z) = 1(label(z) == label_i)`` with the counting
    inner product over the labels.
    """

    kind = "indicator"

    def __init__(self, labels=None, n_bins: int | None = None, offset: float = 0.0,
                 scale: float = 1.0, discrete: bool = False):
        if labels is None:
            if n_bins is None:
                raise ZBasisError("give labels or n_bins")
            labels = np.arange(1, n_bins + 1)
        labels = np.asarray(labels, dtype=float)
        if labels.size < 1 or np.any(np.diff(labels) <= 0):
            raise ZBasisError("labels must be strictly increasing")
        if not scale > 0:
            raise ZBasisError("scale must be positive")
        self.labels = labels
        self.offset = float(offset)
        self.scale = float(scale)
        self.discrete = bool(discrete)
        self.max_index = labels.size
        self.inner_product = "counting" if discrete else "lebesgue"
        self.norm_constant = 1.0 if discrete else math.sqrt(self.scale)
        self.sup_norm = self.norm_constant

    @classmethod
    def from_labels(cls, z_raw, offset: float = 0.0, scale: float = 1.0) -> "IndicatorBasis":
        """Infer bins from raw training responses; integer responses select the discrete form."""
        z_raw = np.asarray(z_raw, dtype=float)
        z_raw = z_raw[~np.isnan(z_raw)]
        discrete = bool(np.all(z_raw == np.round(z_raw)))
        lo, hi = int(np.round(z_raw.min())), int(np.round(z_raw.max()))
        return cls(np.arange(lo, hi + 1), offset=offset, scale=scale, discrete=discrete)

    def to_label(self, z) -> np.ndarray:
        return self.offset + self.scale * np.atleast_1d(np.asarray(z, dtype=float))

    def indicators(self, z, I: int | None = None) -> np.ndarray:
        """Unnormalized 0/1 membership matrix."""
        I = self.max_index if I is None else I
        self.check_index(I)
        v = self.to_label(z)
        lab = self.labels[:I]
        if self.discrete:
            hit = np.isclose(v[:, None], self.labels[None, :], rtol=0, atol=1e-9)
            if v.size and not hit.any(axis=1).all():
                raise ZBasisError("response value is not one of the discrete labels")
            return hit[:, :I].astype(float)
        lo, hi = self.labels[0] - 0.5, self.labels[-1] + 0.5
        if v.size and (v.min() < lo - _DOMAIN_TOL or v.max() > hi + _DOMAIN_TOL):
            raise ZBasisError(f"response outside the label range [{lo}, {hi}]")
        out = ((lab[None, :] - 0.5 <= v[:, None]) & (v[:, None] < lab[None, :] + 0.5)).astype(float)
        # close the last bin on the right so the bins partition the range
        if I == self.max_index:
            out[np.abs(v - hi) <= _DOMAIN_TOL, -1] = 1.0
        return out

    def evaluate(self, z, I: int) -> np.ndarray:
        return self.norm_constant * self.indicators(z, I)

    def quadrature(self, n_nodes: int = 1000):
        if self.discrete:
            nodes = (self.labels - self.offset) / self.scale
            return nodes, np.ones_like(nodes)
        return super().quadrature(n_nodes)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "labels": self.labels.tolist(), "offset": self.offset,
                "scale": self.scale, "discrete": self.discrete}

    def __eq__(self, other):
        return isinstance(other, IndicatorBasis) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash((self.kind, tuple(self.labels), self.offset, self.scale, self.discrete))


def zbasis_from_dict(d: dict) -> ZBasis:
    if d["kind"] == "fourier":
        return FourierBasis()
    if d["kind"] == "indicator":
        return IndicatorBasis(d["labels"], offset=d["offset"], scale=d["scale"], discrete=d["discrete"])
    raise ZBasisError(f"unknown z basis kind {d['kind']!r}")


def phi(basis: ZBasis, i: int, z: float) -> float:
    """Value of the ``i``-th (1-based) basis function at ``z``.

    For :class:`IndicatorBasis` built with the default identity map, ``z`` is
    on the label scale.
    """
    if i < 1:
        raise ZBasisError(f"basis index must be >= 1, got {i}")
    return float(basis.evaluate(np.array([z]), i)[0, i - 1])


def phi_integral_products(basis: ZBasis, I_max: int, n_nodes: int = 10_000) -> np.ndarray:
    """Gram matrix of the first ``I_max`` functions under the basis' inner product."""
    if I_max < 1:
        raise ZBasisError("I_max must be >= 1")
    nodes, w = basis.quadrature(n_nodes)
    if isinstance(basis, IndicatorBasis) and not basis.discrete:
        # integrate over the full label range, not only [0, 1]
        lo = (basis.labels[0] - 0.5 - basis.offset) / basis.scale
        hi = (basis.labels[-1] + 0.5 - basis.offset) / basis.scale
        nodes = np.linspace(lo, hi, n_nodes)
        w = trapezoid_weights(nodes)
    F = basis.evaluate(nodes, I_max)
    return F.T @ (F * w[:, None])


def make_zbasis(kind: str, z_raw=None, offset: float = 0.0, scale: float = 1.0) -> ZBasis:
    if kind == "fourier":
        return FourierBasis()
    if kind == "indicator":
        if z_raw is None:
            raise ZBasisError("indicator basis needs the training responses")
        return IndicatorBasis.from_labels(z_raw, offset, scale)
    raise ZBasisError(f"unknown z basis {kind!r}")
