"""Full-conditional distributions of the block-Gibbs sweep, in plain numpy.

These builders return the canonical (natural-mean, precision) pair for each
update. The engine uses them directly for the cheap subject/group/population
and variance-component moves; the segment-level ones double as the reference
implementation the numba kernels are tested against.
"""

from __future__ import annotations

import numpy as np

from .linalg import LowerIndexMap, vec
from .samplers import CanonicalGaussian

__all__ = [
    "latent_conditional",
    "segment_dynamics_conditional",
    "segment_loading_conditional",
    "parent_conditional",
    "population_conditional",
    "collapsed_dynamics_conditional",
    "collapsed_loading_conditional",
    "restrict_latent_gram",
    "noise_var_posterior",
    "varcomp_posterior",
]


def _dyn_apply(dyn: np.ndarray, h: int, v: np.ndarray, n_latent: int) -> np.ndarray:
    """A_h v with the lag-0 block fixed at minus the identity."""
    if h == 0:
        return -v
    return dyn[:, (h - 1) * n_latent:h * n_latent] @ v


def _dyn_apply_t(dyn: np.ndarray, h: int, v: np.ndarray, n_latent: int) -> np.ndarray:
    if h == 0:
        return -v
    return dyn[:, (h - 1) * n_latent:h * n_latent].T @ v


def latent_conditional(k: int, y_seg: np.ndarray, lat_seg: np.ndarray, loading: np.ndarray,
                       dyn: np.ndarray, noise_var: float, ar_order: int,
                       tau_init: float = 0.0) -> CanonicalGaussian:
    """Conditional of the latent state at 0-based timepoint ``k``.

    Only autoregressive terms whose own-density timepoint falls inside
    [m+1, K] contribute; the first m points otherwise carry a flat (or, when
    ``tau_init`` > 0, zero-mean proper) init prior.
    """
    q = lat_seg.shape[0]
    k_len = lat_seg.shape[1]
    m = ar_order
    inv_s2 = 1.0 / noise_var
    prec = inv_s2 * loading.T @ loading
    b = inv_s2 * loading.T @ y_seg[:, k]
    if k < m and tau_init > 0.0:
        prec = prec + tau_init * np.eye(q)
    for h1 in range(m + 1):
        t_own = k + h1
        if t_own < m or t_own > k_len - 1:
            continue
        blk_own = -np.eye(q) if h1 == 0 else dyn[:, (h1 - 1) * q:h1 * q]
        prec = prec + blk_own.T @ blk_own
        v = np.zeros(q)
        for h2 in range(m + 1):
            if h2 == h1:
                continue
            v += _dyn_apply(dyn, h2, lat_seg[:, k + h1 - h2], q)
        b -= _dyn_apply_t(dyn, h1, v, q)
    boundary = k < m or k > k_len - 1 - m
    if boundary and np.trace(prec) < 0.05 * q:
        # near-improper head boundary: unit-precision floor (see kernels)
        prec = prec + np.eye(q)
    return CanonicalGaussian(b=b, prec=prec)


def _lag_stack_moments(lat_seg: np.ndarray, ar_order: int) -> tuple[np.ndarray, np.ndarray]:
    q, k_len = lat_seg.shape
    m = ar_order
    stacked = np.concatenate([lat_seg[:, m - 1 - h:k_len - 1 - h] for h in range(m)], axis=0)
    sstar = stacked @ stacked.T
    cross = lat_seg[:, m:] @ stacked.T
    return sstar, cross


def segment_dynamics_conditional(lat_seg: np.ndarray, prec_seg: np.ndarray,
                                 parent: np.ndarray, ar_order: int) -> CanonicalGaussian:
    """Conditional of vec([A_1 .. A_m]) for one segment.

    The likelihood precision is (lag-stack scatter) Kronecker identity; the
    prior shrinks toward the vec'd subject-level matrix.
    """
    q = lat_seg.shape[0]
    sstar, cross = _lag_stack_moments(lat_seg, ar_order)
    prec = prec_seg + np.kron(sstar, np.eye(q))
    b = prec_seg @ vec(parent) + vec(cross)
    return CanonicalGaussian(b=b, prec=prec)


def restrict_latent_gram(sm: np.ndarray, fmap: LowerIndexMap) -> np.ndarray:
    """[{sum_k M M^T} (x) I_P] restricted to the free lower-triangular set."""
    same_row = fmap.rows[:, None] == fmap.rows[None, :]
    return sm[np.ix_(fmap.cols, fmap.cols)] * same_row


def segment_loading_conditional(y_seg: np.ndarray, lat_seg: np.ndarray, prec_seg: np.ndarray,
                                parent_low: np.ndarray, noise_var: float,
                                fmap: LowerIndexMap) -> CanonicalGaussian:
    """Conditional of low(loading) for one segment."""
    inv_s2 = 1.0 / noise_var
    sm = lat_seg @ lat_seg.T
    gmat = y_seg @ lat_seg.T
    prec = prec_seg + inv_s2 * restrict_latent_gram(sm, fmap)
    b = prec_seg @ parent_low + inv_s2 * gmat[fmap.rows, fmap.cols]
    return CanonicalGaussian(b=b, prec=prec)


def parent_conditional(prec_up: np.ndarray, parent_vec: np.ndarray, prec_down: np.ndarray,
                       child_sum: np.ndarray, n_children: int) -> CanonicalGaussian:
    """Conditional of a mid-level (subject or group) vectorized matrix.

    Precision-weighted combination of its own parent and the sum of its
    children; used identically for dynamics and loading hierarchies.
    """
    prec = prec_up + n_children * prec_down
    b = prec_up @ parent_vec + prec_down @ child_sum
    return CanonicalGaussian(b=b, prec=prec)


def population_conditional(child_sum: np.ndarray, n_children: int, prec_down: np.ndarray,
                           tau_pop: float = 0.0) -> CanonicalGaussian:
    """Conditional of the population-level matrix under an improper flat prior.

    Mean is the child average, covariance the group-level covariance over R.
    ``tau_pop`` > 0 swaps the flat prior for a proper zero-mean N(0, I/tau).
    """
    d = child_sum.size
    prec = n_children * prec_down
    if tau_pop > 0.0:
        prec = prec + tau_pop * np.eye(d)
    return CanonicalGaussian(b=prec_down @ child_sum, prec=prec)


def collapsed_dynamics_conditional(sstar_sum: np.ndarray, cross_sum: np.ndarray,
                                   prec_up: np.ndarray, parent_vec: np.ndarray,
                                   n_latent: int) -> CanonicalGaussian:
    """Group-level dynamics conditional when segments share one matrix."""
    prec = prec_up + np.kron(sstar_sum, np.eye(n_latent))
    b = prec_up @ parent_vec + vec(cross_sum)
    return CanonicalGaussian(b=b, prec=prec)


def collapsed_loading_conditional(sm_weighted: np.ndarray, g_weighted: np.ndarray,
                                  prec_up: np.ndarray | None, parent_low: np.ndarray | None,
                                  fmap: LowerIndexMap) -> CanonicalGaussian:
    """Shared-loading conditional over many segments.

    ``sm_weighted``/``g_weighted`` are the noise-precision-weighted sums of
    the per-segment latent scatters and data cross-moments; with no prior
    (stage-1 global loading) pass None for the prior pieces.
    """
    prec = restrict_latent_gram(sm_weighted, fmap)
    b = g_weighted[fmap.rows, fmap.cols].astype(np.float64)
    if prec_up is not None:
        prec = prec + prec_up
        b = b + prec_up @ parent_low
    return CanonicalGaussian(b=b, prec=prec)


def noise_var_posterior(y_seg: np.ndarray, lat_seg: np.ndarray, loading: np.ndarray,
                        a0: float, b0: float) -> tuple[float, float]:
    """(shape, rate) of the conjugate inverse-gamma noise-variance posterior."""
    resid = y_seg - loading @ lat_seg
    ssr = float(np.sum(resid * resid))
    p, k_len = y_seg.shape
    return a0 + 0.5 * p * k_len, b0 + 0.5 * ssr


def varcomp_posterior(nu: float, kappa: float, deviations: np.ndarray) -> tuple[float, np.ndarray]:
    """(dof, H + S) of the conjugate Wishart precision posterior.

    ``deviations`` is (n, d): one child-minus-parent vector per row. The
    precision is drawn as Wishart(nu + n, (H + S)^-1) with H = kappa I.
    """
    dev = np.atleast_2d(np.asarray(deviations, dtype=np.float64))
    n, d = dev.shape
    scatter = dev.T @ dev
    return nu + n, kappa * np.eye(d) + scatter
