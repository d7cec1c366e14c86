"""Gaussian kernel, Gram matrices, normalizations and sparsification."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

NORMALIZATIONS = ("none", "diffusion", "density_renormalized")

# memory budget (float64 entries) for one block of pairwise differences
_BLOCK_ENTRIES = 1 << 22


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel ``exp(-||x - y||^2 / (4 * epsilon))`` plus Gram options."""

    epsilon: float
    normalization: str = "none"
    sparsity_threshold: float = 0.0
    family: str = "gaussian"

    def __post_init__(self):
        if self.family != "gaussian":
            raise KernelError(f"unsupported kernel family {self.family!r}")
        if not self.epsilon > 0:
            raise KernelError(f"epsilon must be positive, got {self.epsilon}")
        if self.normalization == "density":
            object.__setattr__(self, "normalization", "density_renormalized")
        if self.normalization not in NORMALIZATIONS:
            raise KernelError(f"unknown normalization {self.normalization!r}")
        if not 0 <= self.sparsity_threshold < 1:
            raise KernelError("sparsity threshold must lie in [0, 1)")


def sq_distances(A, B) -> np.ndarray:
    """Squared Euclidean distances summed coordinate-wise (no expansion trick)."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise KernelError(f"dimension mismatch: {A.shape[1]} vs {B.shape[1]}")
    return cdist(A, B, metric="sqeuclidean")


def kernel_eval(spec: KernelSpec, x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise KernelError(f"dimension mismatch: {x.size} vs {y.size}")
    # (x-y)^2 == (y-x)^2 bitwise, so this is exactly symmetric
    d2 = float(np.sum((x - y) ** 2))
    return float(np.exp(-d2 / (4.0 * spec.epsilon)))


def cross_kernel(spec: KernelSpec, A, B) -> np.ndarray:
    """Raw (unnormalized, thresholded) kernel values between rows of A and B."""
    K = np.exp(-sq_distances(A, B) / (4.0 * spec.epsilon))
    if spec.sparsity_threshold > 0:
        K[K < spec.sparsity_threshold] = 0.0
    return K


@dataclass(frozen=True)
class GramMatrix:
    """Gram matrix over ``points``.

    ``values`` is the matrix handed to the eigensolver (already normalized per
    ``spec.normalization``); ``degrees`` are the row sums of the raw,
    thresholded kernel matrix.
    """

    values: np.ndarray | sp.csr_matrix
    degrees: np.ndarray
    spec: KernelSpec
    points: np.ndarray
    zeroed_fraction: float = 0.0

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def is_sparse(self) -> bool:
        return sp.issparse(self.values)

    def dense(self) -> np.ndarray:
        return self.values.toarray() if self.is_sparse else np.asarray(self.values)


def _raw_blocks(points: np.ndarray, epsilon: float):
    n, d = points.shape
    rows = max(1, min(n, _BLOCK_ENTRIES // max(1, n)))
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        yield start, stop, np.exp(-sq_distances(points[start:stop], points) / (4.0 * epsilon))


def gram(points, spec: KernelSpec) -> GramMatrix:
    """Build the (optionally thresholded and normalized) Gram matrix.

    Rows are produced block by block; with a positive sparsity threshold each
    block is thresholded before assembly so only the sparse matrix is kept.
    """
    X = np.atleast_2d(np.asarray(points, dtype=float))
    n = X.shape[0]
    if n < 1:
        raise KernelError("need at least one point")
    xi = spec.sparsity_threshold

    if xi > 0:
        pieces = []
        zeroed = 0
        for start, stop, blk in _raw_blocks(X, spec.epsilon):
            mask = blk < xi
            zeroed += int(mask.sum())
            blk[mask] = 0.0
            pieces.append(sp.csr_matrix(blk))
        K = sp.vstack(pieces, format="csr")
        # cdist is symmetric bitwise; enforce anyway so thresholding ties cannot differ
        K = sp.triu(K, format="csr")
        K = (K + sp.triu(K, k=1, format="csr").T).tocsr()
        K.sort_indices()
        degrees = np.asarray(K.sum(axis=1)).ravel()
        zeroed_fraction = zeroed / (n * n)
    else:
        K = np.empty((n, n))
        for start, stop, blk in _raw_blocks(X, spec.epsilon):
            K[start:stop] = blk
        K = np.triu(K) + np.triu(K, 1).T
        degrees = K.sum(axis=1)
        zeroed_fraction = 0.0

    G = GramMatrix(K, degrees, spec, X, zeroed_fraction)
    if spec.normalization == "diffusion":
        S, _ = normalize_diffusion(G)
        G = GramMatrix(S, degrees, spec, X, zeroed_fraction)
    elif spec.normalization == "density_renormalized":
        G = GramMatrix(_scale_sym(K, 1.0 / degrees), degrees, spec, X, zeroed_fraction)
    return G


def _scale_sym(M, s: np.ndarray):
    """Return diag(s) M diag(s), exactly symmetric."""
    if sp.issparse(M):
        D = sp.diags(s)
        out = (D @ M @ D).tocsr()
        out = sp.triu(out, format="csr")
        out = (out + sp.triu(out, k=1, format="csr").T).tocsr()
        out.sort_indices()
        return out
    out = M * s[:, None] * s[None, :]
    return np.triu(out) + np.triu(out, 1).T


def normalize_diffusion(G: GramMatrix):
    """Symmetric conjugate ``D^-1/2 K D^-1/2`` of the row-stochastic ``D^-1 K``.

    ``G.values`` must hold the raw kernel matrix. Returns ``(S, degrees)``.
    """
    deg = np.asarray(G.degrees, dtype=float)
    zero = np.flatnonzero(~(deg > 0))
    if zero.size:
        raise KernelError(f"point {zero[0]} is isolated (zero degree); lower the sparsity threshold")
    return _scale_sym(G.values, 1.0 / np.sqrt(deg)), deg


def sparsify(G: GramMatrix, threshold: float) -> tuple[GramMatrix, float]:
    """Zero entries below ``threshold`` and return CSR storage plus the zeroed fraction."""
    if not 0 <= threshold < 1:
        raise KernelError("sparsity threshold must lie in [0, 1)")
    M = G.dense().copy()
    mask = M < threshold
    frac = float(mask.sum()) / M.size
    M[mask] = 0.0
    S = sp.csr_matrix(M)
    S.sort_indices()
    return GramMatrix(S, G.degrees, G.spec, G.points, frac), frac


def out_of_sample_kernel(spec: KernelSpec, X_new, points, degrees) -> np.ndarray:
    """Kernel between new points and training points under the training normalization.

    diffusion: row-stochastic ``K(x, x_k) / p(x)``;
    density_renormalized: ``K(x, x_k) / (p(x) p(x_k))``;
    with ``p(x) = sum_k K(x, x_k)`` over the training points.
    """
    K = cross_kernel(spec, X_new, points)
    if spec.normalization == "none":
        return K
    p = K.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(p > 0, 1.0 / p, 0.0)
    if spec.normalization == "diffusion":
        return K * inv[:, None]
    return K * inv[:, None] / degrees[None, :]


# --- binary cache ---------------------------------------------------------------

_GRAM_MAGIC = b"SSGRAM\x00\x01"
_NORM_TAGS = {name: i for i, name in enumerate(NORMALIZATIONS)}


def save_gram(G: GramMatrix, path) -> None:
    """Header ``(n, d, epsilon, normalization, threshold)`` then row-major float64 or CSR arrays."""
    n, d = G.points.shape
    header = struct.pack(
        "<8sQQdBdB", _GRAM_MAGIC, n, d, G.spec.epsilon, _NORM_TAGS[G.spec.normalization],
        G.spec.sparsity_threshold, 1 if G.is_sparse else 0,
    )
    with Path(path).open("wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(G.points, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(G.degrees, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", G.zeroed_fraction))
        if G.is_sparse:
            M = G.values
            fh.write(struct.pack("<Q", M.nnz))
            fh.write(M.indptr.astype("<i8").tobytes())
            fh.write(M.indices.astype("<i8").tobytes())
            fh.write(M.data.astype("<f8").tobytes())
        else:
            fh.write(np.ascontiguousarray(G.values, dtype="<f8").tobytes())


def load_gram(path) -> GramMatrix:
    buf = Path(path).read_bytes()
    fmt = "<8sQQdBdB"
    magic, n, d, eps, tag, xi, sparse = struct.unpack_from(fmt, buf, 0)
    if magic != _GRAM_MAGIC:
        raise KernelError(f"{path}: not a Gram matrix cache")
    off = struct.calcsize(fmt)

    def take(count, dtype="<f8"):
        nonlocal off
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr.astype(dtype[1:] if dtype.startswith("<") else dtype)

    points = take(n * d).reshape(n, d)
    degrees = take(n)
    (zf,) = struct.unpack_from("<d", buf, off)
    off += 8
    if sparse:
        (nnz,) = struct.unpack_from("<Q", buf, off)
        off += 8
        indptr = take(n + 1, "<i8")
        indices = take(nnz, "<i8")
        data = take(nnz)
        values = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    else:
        values = take(n * n).reshape(n, n)
    spec = KernelSpec(eps, NORMALIZATIONS[tag], xi)
    return GramMatrix(values, degrees, spec, points, zf)

