"""Eigendecomposition of Gram matrices and Nyström out-of-sample extension."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .kernel import GramMatrix, KernelSpec, out_of_sample_kernel

logger = logging.getLogger(__name__)

BASIS_FORMAT_VERSION = 1
DROP_RTOL = 1e-10
TIE_RTOL = 1e-12
_EVAL_BLOCK = 1 << 22


class EigenError(RuntimeError):
    pass


@dataclass(frozen=True)
class SpectralBasis:
    """Eigenpairs of a Gram matrix together with what Nyström needs.

    ``eigenvectors`` (n, J) are the unit-norm vectors extended by Nyström.
    For the diffusion normalization these are the right eigenvectors of the
    row-stochastic operator (so the first one is constant), not the
    orthonormal eigenvectors of its symmetric conjugate.
    """

    points: np.ndarray
    kernel_spec: KernelSpec
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    degrees: np.ndarray
    method: str = "dense"

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @property
    def J(self) -> int:
        return self.eigenvalues.shape[0]

    def in_sample_values(self) -> np.ndarray:
        """Nyström values at the training points, ``sqrt(n) * eigenvectors``."""
        return np.sqrt(self.n) * self.eigenvectors


def _as_operator(M):
    return M if sp.issparse(M) else np.asarray(M)


def randomized_eigh(M, k: int, oversampling: int = 10, power_iters: int = 2, seed=0):
    """Top-``k`` eigenpairs of a symmetric PSD matrix by randomized subspace iteration.

    Range finder with Gaussian test matrix, ``power_iters`` re-orthonormalized
    passes, then a Rayleigh-Ritz step on the sketch.
    """
    M = _as_operator(M)
    n = M.shape[0]
    ell = min(n, k + oversampling)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(M @ rng.standard_normal((n, ell)))
    for _ in range(power_iters):
        Q, _ = np.linalg.qr(M @ Q)
    B = Q.T @ (M @ Q)
    B = 0.5 * (B + B.T)
    w, V = np.linalg.eigh(B)
    order = np.argsort(w)[::-1][:k]
    return w[order], Q @ V[:, order]


def symmetric_eigh(M, k: int, method: str = "dense", oversampling: int = 10,
                   power_iters: int = 2, seed=0):
    """Top-``k`` eigenpairs of a symmetric matrix, eigenvalues descending."""
    n = M.shape[0]
    if method == "dense":
        A = M.toarray() if sp.issparse(M) else np.asarray(M)
        try:
            w, V = scipy.linalg.eigh(A, subset_by_index=[n - k, n - 1])
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise EigenError(f"dense eigensolver failed for n={n}, k={k}: {exc}") from exc
        return w[::-1], V[:, ::-1]
    if method == "randomized":
        w, V = randomized_eigh(M, k, oversampling, power_iters, seed)
        if not np.all(np.isfinite(w)):
            raise EigenError(
                f"randomized eigensolver produced non-finite values "
                f"(n={n}, k={k}, oversampling={oversampling}, power_iters={power_iters})")
        return w, V
    raise ValueError(f"unknown eigensolver method {method!r}")


def _canonical_signs(V: np.ndarray) -> np.ndarray:
    if V.size == 0:
        return V
    idx = np.argmax(np.abs(V), axis=0)
    s = np.sign(V[idx, np.arange(V.shape[1])])
    s[s == 0] = 1.0
    return V * s


def _order(w: np.ndarray, V: np.ndarray):
    """Sort descending; near-equal eigenvalues ordered by descending lexicographic eigenvector."""
    order = np.argsort(-w, kind="stable")
    w, V = w[order], V[:, order]
    if w.size < 2:
        return w, V
    tol = TIE_RTOL * max(abs(w[0]), 1e-300)
    start = 0
    cols = list(range(w.size))
    for stop in range(1, w.size + 1):
        if stop == w.size or abs(w[stop - 1] - w[stop]) > tol:
            if stop - start > 1:
                grp = cols[start:stop]
                grp.sort(key=lambda c: tuple(V[:, c]), reverse=True)
                cols[start:stop] = grp
            start = stop
    cols = np.asarray(cols)
    return w[cols], V[:, cols]


def eigendecompose(G: GramMatrix, J_max: int, method: str = "dense", *,
                   oversampling: int = 10, power_iters: int = 2, seed=0) -> SpectralBasis:
    """Top ``J_max`` eigenpairs of ``G.values`` as a :class:`SpectralBasis`.

    Eigenpairs with eigenvalue at most ``1e-10`` times the largest are dropped
    (with a warning) because Nyström divides by the eigenvalue.
    """
    n = G.n
    if J_max < 1 or J_max > n:
        raise ValueError(f"J_max must lie in [1, n={n}], got {J_max}")
    w, V = symmetric_eigh(G.values, J_max, method, oversampling, power_iters, seed)

    if G.spec.normalization == "diffusion":
        V = V / np.sqrt(G.degrees)[:, None]
        V = V / np.linalg.norm(V, axis=0)
    V = _canonical_signs(V)
    w, V = _order(w, V)

    top = w[0] if w.size else 0.0
    keep = w > DROP_RTOL * top if top > 0 else np.zeros_like(w, dtype=bool)
    if not keep.all():
        dropped = int((~keep).sum())
        warnings.warn(
            f"dropping {dropped} eigenpair(s) with eigenvalue <= {DROP_RTOL:g} x top; J reduced to {int(keep.sum())}",
            RuntimeWarning, stacklevel=2)
        # keep the leading block only so indices stay contiguous
        first_bad = int(np.argmin(keep))
        w, V = w[:first_bad], V[:, :first_bad]
    if w.size == 0:
        raise EigenError("no eigenpair with positive eigenvalue")
    return SpectralBasis(G.points, G.spec, w.copy(), np.ascontiguousarray(V), np.asarray(G.degrees).copy(), method)


def _all_values(basis: SpectralBasis, P: np.ndarray) -> np.ndarray:
    m = P.shape[0]
    out = np.empty((m, basis.J))
    if m == 0:
        return out
    rows = max(1, _EVAL_BLOCK // max(1, basis.n))
    coef = np.sqrt(basis.n) / basis.eigenvalues
    for start in range(0, m, rows):
        K = out_of_sample_kernel(basis.kernel_spec, P[start:start + rows], basis.points, basis.degrees)
        out[start:start + rows] = (K @ basis.eigenvectors) * coef
    return out


def nystrom_eval_batch(basis: SpectralBasis, points, j_range=None) -> np.ndarray:
    """Nyström eigenfunction values, shape ``(len(points), len(j_range))``.

    ``j_range`` holds 1-based indices; ``None`` means all ``1..J``.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim == 1:
        P = P[None, :]
    if P.shape[0] and P.shape[1] != basis.d:
        raise ValueError(f"points have dimension {P.shape[1]}, basis expects {basis.d}")
    if j_range is None:
        cols = np.arange(basis.J)
    else:
        cols = np.asarray(list(j_range), dtype=int) - 1
        if cols.size and (cols.min() < 0 or cols.max() >= basis.J):
            raise IndexError(f"eigenfunction index out of range 1..{basis.J}")
    if cols.size == 0:
        return np.empty((P.shape[0], 0))
    return _all_values(basis, P)[:, cols]


def nystrom_eval(basis: SpectralBasis, x, j: int) -> float:
    """``sqrt(n) / l_j * sum_k psi_j(x_k) K(x, x_k)`` for a single point."""
    if not 1 <= j <= basis.J:
        raise IndexError(f"eigenfunction index {j} out of range 1..{basis.J}")
    return float(nystrom_eval_batch(basis, np.asarray(x, dtype=float)[None, :])[0, j - 1])


def _spec_dict(spec: KernelSpec) -> dict:
    return {"epsilon": spec.epsilon, "normalization": spec.normalization,
            "sparsity_threshold": spec.sparsity_threshold, "family": spec.family}


def basis_arrays(basis: SpectralBasis, prefix: str = "basis_") -> dict:
    meta = {"version": BASIS_FORMAT_VERSION, "kernel": _spec_dict(basis.kernel_spec), "method": basis.method}
    return {
        prefix + "meta": np.array(json.dumps(meta)),
        prefix + "points": basis.points,
        prefix + "eigenvalues": basis.eigenvalues,
        prefix + "eigenvectors": basis.eigenvectors,
        prefix + "degrees": basis.degrees,
    }


def basis_from_arrays(arrs, prefix: str = "basis_") -> SpectralBasis:
    meta = json.loads(str(arrs[prefix + "meta"]))
    if meta.get("version") != BASIS_FORMAT_VERSION:
        raise ValueError(f"unsupported basis format version {meta.get('version')}")
    k = meta["kernel"]
    spec = KernelSpec(k["epsilon"], k["normalization"], k["sparsity_threshold"], k["family"])
    return SpectralBasis(np.array(arrs[prefix + "points"]), spec, np.array(arrs[prefix + "eigenvalues"]),
                         np.array(arrs[prefix + "eigenvectors"]), np.array(arrs[prefix + "degrees"]),
                         meta["method"])


def save_basis(basis: SpectralBasis, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **basis_arrays(basis))


def load_basis(path) -> SpectralBasis:
    with np.load(path, allow_pickle=False) as arrs:
        return basis_from_arrays(arrs)
