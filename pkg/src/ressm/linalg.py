"""Vectorization maps, lower-triangular indexing and companion-matrix algebra.

Conventions used throughout the package:

* ``vec`` stacks columns (column-major / Fortran order).
* ``low`` is ``vec`` with the strictly-upper-triangular entries removed; for a
  P x Q matrix (P >= Q) it has length (2P - Q + 1) Q / 2.
* dynamics matrices of an order-m vector autoregression are stored as the
  horizontal concatenation ``[A_1 .. A_m]`` of shape (Q, m*Q).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "vec",
    "unvec",
    "low",
    "unlow",
    "low_len",
    "LowerIndexMap",
    "companion_matrix",
    "spectral_radius",
    "dynamics_blocks",
    "symmetrize",
]


def vec(x: np.ndarray) -> np.ndarray:
    """Stack the columns of a matrix into one vector."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"vec expects a matrix, got ndim={x.ndim}")
    return x.reshape(-1, order="F").copy()


def unvec(v: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec` for a ``rows x cols`` matrix."""
    v = np.asarray(v)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape length-{v.size} vector to {rows}x{cols}")
    return v.reshape(rows, cols, order="F").copy()


def low_len(n_rows: int, n_cols: int) -> int:
    """Number of on-or-below-diagonal entries of a tall matrix."""
    if n_rows < n_cols:
        raise ValueError(f"need n_rows >= n_cols, got {n_rows} < {n_cols}")
    return (2 * n_rows - n_cols + 1) * n_cols // 2


@dataclass(frozen=True)
class LowerIndexMap:
    """Index map between ``vec(X)`` and ``low(X)`` for a P x Q matrix, P >= Q.

    ``flat`` holds the positions of the lower-triangular entries inside
    ``vec(X)`` (strictly increasing); ``rows``/``cols`` are the matching
    (row, column) subscripts. ``vec(X)[flat] == low(X)``.
    """

    n_rows: int
    n_cols: int
    flat: np.ndarray = field(repr=False)
    rows: np.ndarray = field(repr=False)
    cols: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, n_rows: int, n_cols: int) -> "LowerIndexMap":
        if n_rows < n_cols:
            raise ValueError(f"need n_rows >= n_cols, got {n_rows} < {n_cols}")
        rows, cols = [], []
        for q in range(n_cols):
            for p in range(q, n_rows):
                rows.append(p)
                cols.append(q)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        flat = cols * n_rows + rows
        return cls(n_rows=n_rows, n_cols=n_cols, flat=flat, rows=rows, cols=cols)

    def __len__(self) -> int:
        return self.flat.size


def low(x: np.ndarray) -> np.ndarray:
    """Column-stack a tall matrix, dropping the strictly-upper entries."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"low expects a matrix, got ndim={x.ndim}")
    p, q = x.shape
    fmap = LowerIndexMap.build(p, q)
    return x[fmap.rows, fmap.cols].copy()


def unlow(v: np.ndarray, n_rows: int, n_cols: int) -> np.ndarray:
    """Rebuild a tall matrix from :func:`low` output (upper triangle zero)."""
    fmap = LowerIndexMap.build(n_rows, n_cols)
    v = np.asarray(v)
    if v.size != len(fmap):
        raise ValueError(f"expected length {len(fmap)}, got {v.size}")
    out = np.zeros((n_rows, n_cols), dtype=np.float64)
    out[fmap.rows, fmap.cols] = v
    return out


def dynamics_blocks(a: np.ndarray, order: int) -> list[np.ndarray]:
    """Split a (Q, m*Q) dynamics matrix into its m lag blocks."""
    a = np.asarray(a)
    q = a.shape[0]
    if a.shape[1] != order * q:
        raise ValueError(f"dynamics matrix has shape {a.shape}, expected ({q}, {order * q})")
    return [a[:, h * q:(h + 1) * q] for h in range(order)]


def companion_matrix(a: np.ndarray, order: int) -> np.ndarray:
    """Assemble the (m*Q, m*Q) first-order companion form of an order-m VAR.

    The top block row is ``[A_1 .. A_m]``, the sub-diagonal carries identity
    blocks. For m = 1 this is just ``A_1``.
    """
    blocks = dynamics_blocks(a, order)
    q = blocks[0].shape[0]
    d = order * q
    comp = np.zeros((d, d), dtype=np.float64)
    comp[:q, :] = np.asarray(a, dtype=np.float64)
    for h in range(order - 1):
        comp[(h + 1) * q:(h + 2) * q, h * q:(h + 1) * q] = np.eye(q)
    return comp


def spectral_radius(mat: np.ndarray) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(mat))))


def symmetrize(x: np.ndarray) -> np.ndarray:
    """(X + X^T)/2; guards Cholesky against asymmetric rounding drift."""
    return 0.5 * (x + x.T)
