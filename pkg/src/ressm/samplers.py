"""Deterministic-seeded samplers for the Gaussian/Wishart/inverse-gamma family.

All samplers take an explicit ``numpy.random.Generator`` so they are pure
given the stream, and safe to call concurrently with disjoint streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .linalg import symmetrize

__all__ = [
    "CanonicalGaussian",
    "cholesky_spd",
    "sample_canonical_gaussian",
    "canonical_mean",
    "sample_wishart",
    "sample_wishart_inv_scale",
    "sample_inverse_gamma",
]


@dataclass
class CanonicalGaussian:
    """Gaussian in natural parameters: mean ``Q^-1 b``, covariance ``Q^-1``.

    ``b`` is the natural-mean vector, ``prec`` the symmetric positive-definite
    precision matrix.
    """

    b: np.ndarray
    prec: np.ndarray

    def __post_init__(self):
        self.b = np.atleast_1d(np.asarray(self.b, dtype=np.float64))
        self.prec = np.atleast_2d(np.asarray(self.prec, dtype=np.float64))
        d = self.b.size
        if self.prec.shape != (d, d):
            raise ValueError(f"precision shape {self.prec.shape} does not match b of length {d}")
        scale = max(1.0, float(np.max(np.abs(self.prec))))
        if np.max(np.abs(self.prec - self.prec.T)) > 1e-12 * scale:
            raise ValueError("precision matrix is not symmetric to 1e-12 relative")


def cholesky_spd(mat: np.ndarray, jitter: float = 1e-10) -> np.ndarray:
    """Lower Cholesky factor with one jitter retry, then a hard error.

    The first failed factorization gets ``jitter * I`` added once; a second
    failure signals genuine numerical corruption and is raised.
    """
    sym = symmetrize(np.asarray(mat, dtype=np.float64))
    try:
        return np.linalg.cholesky(sym)
    except np.linalg.LinAlgError:
        pass
    try:
        return np.linalg.cholesky(sym + jitter * np.eye(sym.shape[0]))
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(
            f"precision/scale matrix of dim {sym.shape[0]} is not SPD (jitter retry failed)"
        ) from exc


def sample_canonical_gaussian(g: CanonicalGaussian, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(Q^-1 b, Q^-1) without forming the inverse.

    Factor Q = L L^T once; the draw is L^-T (L^-1 b + z) with z standard
    normal, costing two triangular solves.
    """
    chol = cholesky_spd(g.prec)
    z = rng.standard_normal(g.b.size)
    w = scipy.linalg.solve_triangular(chol, g.b, lower=True)
    return scipy.linalg.solve_triangular(chol, w + z, lower=True, trans="T")


def canonical_mean(g: CanonicalGaussian) -> np.ndarray:
    chol = cholesky_spd(g.prec)
    w = scipy.linalg.solve_triangular(chol, g.b, lower=True)
    return scipy.linalg.solve_triangular(chol, w, lower=True, trans="T")


def _bartlett_factor(dof: float, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Lower-triangular Bartlett factor B with B B^T ~ Wishart(dof, I)."""
    b = np.zeros((dim, dim))
    for i in range(dim):
        b[i, i] = np.sqrt(rng.chisquare(dof - i))
    idx = np.tril_indices(dim, k=-1)
    b[idx] = rng.standard_normal(idx[0].size)
    return b


def sample_wishart(dof: float, scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Wishart draw with mean ``dof * scale`` via the Bartlett decomposition.

    Exact for any real dof >= dim; O(dim^3).
    """
    scale = np.atleast_2d(np.asarray(scale, dtype=np.float64))
    dim = scale.shape[0]
    if dof < dim:
        raise ValueError(f"Wishart dof {dof} below dimension {dim}")
    chol = cholesky_spd(scale)
    b = _bartlett_factor(float(dof), dim, rng)
    lb = chol @ b
    return lb @ lb.T


def sample_wishart_inv_scale(dof: float, inv_scale: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw from Wishart(dof, V^-1) given V itself, with no explicit inverse.

    Used for conjugate precision updates W(nu + n, (H + S)^-1): factor
    V = H + S = L L^T and map a Wishart(dof, I) Bartlett factor through L^-T.
    """
    inv_scale = np.atleast_2d(np.asarray(inv_scale, dtype=np.float64))
    dim = inv_scale.shape[0]
    if dof < dim:
        raise ValueError(f"Wishart dof {dof} below dimension {dim}")
    chol = cholesky_spd(inv_scale)
    b = _bartlett_factor(float(dof), dim, rng)
    tb = scipy.linalg.solve_triangular(chol, b, lower=True, trans="T")
    return tb @ tb.T


def sample_inverse_gamma(shape: float, rate: float, rng: np.random.Generator) -> float:
    """Inverse-gamma draw (mean rate/(shape-1) for shape > 1)."""
    if shape <= 0 or rate <= 0:
        raise ValueError(f"inverse-gamma parameters must be positive, got ({shape}, {rate})")
    return float(rate / rng.gamma(shape, 1.0))
