"""Data ingestion, response rescaling and train/validation/test splitting."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


class DataError(ValueError):
    """Raised for malformed or degenerate input data."""


@dataclass(frozen=True)
class ZTransform:
    """Affine map ``z_unit = (z_raw - offset) / scale``."""

    offset: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if not (self.scale > 0 and math.isfinite(self.scale)):
            raise DataError(f"z transform scale must be positive, got {self.scale}")

    def forward(self, z):
        return (np.asarray(z, dtype=float) - self.offset) / self.scale

    def inverse(self, u):
        return np.asarray(u, dtype=float) * self.scale + self.offset

    @property
    def is_identity(self) -> bool:
        return self.offset == 0.0 and self.scale == 1.0


@dataclass
class Dataset:
    """Covariates ``X`` (n, d) and responses ``z`` (n,).

    Unlabeled samples carry ``nan`` in ``z``; a fully unlabeled dataset may
    use ``z=None``.
    """

    X: np.ndarray
    z: np.ndarray | None = None
    z_transform: ZTransform = field(default_factory=ZTransform)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise DataError("X must be a 2-d array")
        if X.shape[0] > 0 and X.shape[1] < 1:
            raise DataError("covariate dimension must be at least 1")
        self.X = X
        if self.z is not None:
            z = np.asarray(self.z, dtype=float).reshape(-1)
            if z.shape[0] != X.shape[0]:
                raise DataError(f"X has {X.shape[0]} rows but z has {z.shape[0]}")
            if np.any(np.isinf(z)):
                raise DataError("labeled responses must be finite")
            self.z = z

    def __len__(self):
        return self.X.shape[0]

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def labeled_mask(self) -> np.ndarray:
        if self.z is None:
            return np.zeros(self.n, dtype=bool)
        return ~np.isnan(self.z)

    @property
    def is_labeled(self) -> bool:
        return self.n > 0 and bool(self.labeled_mask.all())

    def labeled(self) -> "Dataset":
        m = self.labeled_mask
        return Dataset(self.X[m], self.z[m] if self.z is not None else None, self.z_transform)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.X[idx], None if self.z is None else self.z[idx], self.z_transform)

    def raw_z(self) -> np.ndarray:
        """Responses mapped back to the original scale."""
        if self.z is None:
            raise DataError("dataset is unlabeled")
        return self.z_transform.inverse(self.z)


def _parse_float(cell: str, lineno: int, col: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise DataError(f"line {lineno}: non-numeric value {cell!r} in column {col + 1}") from None


def _is_numeric_row(row) -> bool:
    try:
        [float(c) for c in row]
    except ValueError:
        return False
    return True


def load_csv(path, response_column: str | int | None = None) -> Dataset:
    """Read a comma-separated file.

    A header row is detected when the first row is not entirely numeric.
    ``response_column`` selects the response by header name or 0-based index;
    with ``None`` every column is a covariate and the dataset is unlabeled.
    Empty response cells (or ``nan``) mark unlabeled rows.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: empty file")

    header = None
    first_line = 1
    if not _is_numeric_row(rows[0]):
        header = [c.strip() for c in rows[0]]
        rows = rows[1:]
        first_line = 2
    ncol = len(header) if header is not None else len(rows[0]) if rows else 0

    if response_column is None:
        zcol = None
    elif isinstance(response_column, str) and not response_column.lstrip("-").isdigit():
        if header is None or response_column not in header:
            raise DataError(f"{path}: response column {response_column!r} not found in header")
        zcol = header.index(response_column)
    else:
        zcol = int(response_column)
        if zcol < 0:
            zcol += ncol
        if not 0 <= zcol < ncol:
            raise DataError(f"{path}: response column index {response_column} out of range")

    data = np.empty((len(rows), ncol))
    for k, row in enumerate(rows):
        lineno = first_line + k
        if len(row) != ncol:
            raise DataError(f"line {lineno}: expected {ncol} fields, found {len(row)}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if c == zcol and cell == "":
                data[k, c] = np.nan
            else:
                data[k, c] = _parse_float(cell, lineno, c)

    if zcol is None:
        if ncol < 1:
            raise DataError(f"{path}: no covariate columns")
        return Dataset(data)
    X = np.delete(data, zcol, axis=1)
    if X.shape[1] < 1:
        raise DataError(f"{path}: no covariate columns besides the response")
    return Dataset(X, data[:, zcol])


def save_csv(ds: Dataset, path, raw: bool = True) -> None:
    """Write ``x1..xd[,z]`` with a header; floats use round-trip repr."""
    path = Path(path)
    header = [f"x{j + 1}" for j in range(ds.d)]
    z = None
    if ds.z is not None:
        header.append("z")
        z = ds.raw_z() if raw else ds.z
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [repr(float(v)) for v in ds.X[i]]
            if z is not None:
                row.append("" if np.isnan(z[i]) else repr(float(z[i])))
            w.writerow(row)


def fit_response_transform(ds: Dataset) -> ZTransform:
    if ds.z is None:
        raise DataError("cannot rescale an unlabeled dataset")
    z = ds.raw_z()
    z = z[~np.isnan(z)]
    if z.size < 2 or np.ptp(z) == 0:
        raise DataError("degenerate response range: need at least two distinct labeled z values")
    return ZTransform(offset=float(z.min()), scale=float(z.max() - z.min()))


def rescale_response(ds: Dataset, transform: ZTransform | None = None) -> Dataset:
    """Map labeled responses into [0, 1].

    Without ``transform`` the min/max of ``ds`` define it.  With a given
    transform (typically fitted on the training split) values falling outside
    [0, 1] are clamped and a warning is logged.
    """
    if transform is None:
        transform = fit_response_transform(ds)
    raw = ds.raw_z()
    u = transform.forward(raw)
    # exact endpoints for the fitting set
    if ds.z_transform == transform:
        u = ds.z.copy()
    outside = (u < 0) | (u > 1)
    if np.any(outside):
        logger.warning("clamping %d response value(s) outside [0, 1]", int(outside.sum()))
        u = np.clip(u, 0.0, 1.0)
    return Dataset(ds.X, u, transform)


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.15
    test_frac: float = 0.15
    seed: int = 0

    def __post_init__(self):
        fr = (self.train_frac, self.val_frac, self.test_frac)
        if any(not 0 < f < 1 for f in fr):
            raise DataError(f"split fractions must lie in (0, 1), got {fr}")
        if not math.isclose(sum(fr), 1.0, rel_tol=0, abs_tol=1e-12):
            raise DataError(f"split fractions must sum to 1, got {sum(fr)}")


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = math.floor(n * spec.train_frac + 1e-9)
    n_val = math.floor(n * spec.val_frac + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset, Dataset]:
    """Random partition into train/validation/test.

    Train and validation sizes are floored, the test part takes the remainder.
    """
    n = ds.n
    sizes = split_sizes(n, spec)
    if n < 3 or min(sizes) < 1:
        raise DataError(f"n={n} is too small for three nonempty parts (sizes {sizes})")
    perm = np.random.default_rng(spec.seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return ds.subset(perm[:a]), ds.subset(perm[a:b]), ds.subset(perm[b:])


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.mean) / self.scale


def standardize_covariates(ds: Dataset, constant: str = "raise") -> tuple[Dataset, Standardizer]:
    """Centre each covariate and scale it to unit sample variance (n - 1 denominator).

    ``constant="keep"`` leaves zero-variance coordinates centred but unscaled
    instead of raising.
    """
    X = ds.X
    if X.shape[0] < 2:
        raise DataError("need at least two samples to standardize")
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(sd > 0))
    if bad.size:
        if constant != "keep":
            raise DataError(f"covariate {bad[0] + 1} has zero variance")
        sd = sd.copy()
        sd[bad] = 1.0
    st = Standardizer(mean, sd)
    return replace(ds, X=st.apply(X)), st
