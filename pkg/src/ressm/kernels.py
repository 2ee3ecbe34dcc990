"""Hot per-segment update kernels (numba, nogil).

Each kernel processes a batch of segment indices serially and writes only to
that segment's slices, so batches can run on independent threads with
pre-generated noise and still produce bitwise-identical results for any
thread count. Random inputs (standard normals / standard gammas) are always
passed in, never drawn here.

Factorizations use an in-kernel Cholesky that symmetrizes first, retries once
with 1e-10 diagonal jitter, and reports failure through the per-segment
``err`` array instead of raising (keeps the retry deterministic under any
chunking).

Layout conventions: observations ``y`` are (S, P, K); latents ``lat`` are
(S, Q, K); dynamics matrices are the lag concatenation ``[A_1 .. A_m]`` of
shape (Q, m*Q); ``vec`` ordering of a (Q, mQ) matrix puts entry (r, c) at
c*Q + r. The lag-0 dynamics block is implicitly minus the identity.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = [
    "latent_scan",
    "segment_dynamics",
    "segment_loading",
    "segment_noise_var",
    "segment_moments",
    "segment_loglik",
]

_JITTER = 1e-10


@njit(cache=True, nogil=True, inline="always")
def _fwd_solve(chol, b, out):
    n = b.shape[0]
    for i in range(n):
        acc = b[i]
        for j in range(i):
            acc -= chol[i, j] * out[j]
        out[i] = acc / chol[i, i]


@njit(cache=True, nogil=True, inline="always")
def _bwd_solve_t(chol, b, out):
    n = b.shape[0]
    for i in range(n - 1, -1, -1):
        acc = b[i]
        for j in range(i + 1, n):
            acc -= chol[j, i] * out[j]
        out[i] = acc / chol[i, i]


@njit(cache=True, nogil=True)
def _draw_canonical(chol, b, z, scratch, out):
    """out = chol^-T (chol^-1 b + z); z=0 gives the conditional mean."""
    _fwd_solve(chol, b, scratch)
    for i in range(b.shape[0]):
        scratch[i] += z[i]
    _bwd_solve_t(chol, scratch, out)


@njit(cache=True, nogil=True)
def _chol_lower(a, out) -> bool:
    n = a.shape[0]
    for i in range(n):
        for j in range(i + 1):
            acc = a[i, j]
            for k in range(j):
                acc -= out[i, k] * out[j, k]
            if i == j:
                if acc <= 0.0 or not np.isfinite(acc):
                    return False
                out[i, i] = np.sqrt(acc)
            else:
                out[i, j] = acc / out[j, j]
    return True


@njit(cache=True, nogil=True)
def _chol_spd(a, out) -> bool:
    """Symmetrize in place, factor; one jitter retry before giving up."""
    n = a.shape[0]
    for i in range(n):
        for j in range(i):
            v = 0.5 * (a[i, j] + a[j, i])
            a[i, j] = v
            a[j, i] = v
    if _chol_lower(a, out):
        return True
    for i in range(n):
        a[i, i] += _JITTER
    return _chol_lower(a, out)


@njit(cache=True, nogil=True)
def latent_scan(seg_ids, y, lat, loading, dyn, noise_var, z, m, tau_init, err):
    """Single-site Gibbs scan over timepoints of each segment's latent states.

    The interior precision (identical at every interior timepoint) is
    factorized once per segment; the first and last m points drop the
    autoregressive terms whose own-density timepoint falls outside the
    window and are factorized separately. ``z`` is (S, K, Q) standard normal.
    """
    n_seg = seg_ids.shape[0]
    q = lat.shape[1]
    k_len = lat.shape[2]
    for si in range(n_seg):
        s = seg_ids[si]
        th = loading[s]
        a = dyn[s]
        inv_s2 = 1.0 / noise_var[s]

        gram = inv_s2 * np.dot(th.T, th)          # (Q, Q)
        fmat = inv_s2 * np.dot(th.T, y[s])        # (Q, K)

        # Gram blocks of the dynamics; the lag-0 block is -I so its Gram is I.
        ata = np.empty((m + 1, q, q))
        for i in range(q):
            for j in range(q):
                ata[0, i, j] = 1.0 if i == j else 0.0
        for h in range(1, m + 1):
            blk = np.ascontiguousarray(a[:, (h - 1) * q:h * q])
            ata[h] = np.dot(blk.T, blk)

        prec_int = gram.copy()
        for h in range(m + 1):
            prec_int += ata[h]
        chol_int = np.empty((q, q))
        if not _chol_spd(prec_int, chol_int):
            err[s] = 1
            continue

        bvec = np.empty(q)
        v = np.empty(q)
        scratch = np.empty(q)
        xout = np.empty(q)
        prec_k = np.empty((q, q))
        chol_k = np.empty((q, q))

        for k in range(k_len):
            interior = (k >= m) and (k <= k_len - 1 - m)
            for i in range(q):
                bvec[i] = fmat[i, k]
            if not interior:
                prec_k[:] = gram
                if k < m and tau_init > 0.0:
                    for i in range(q):
                        prec_k[i, i] += tau_init
            # For each in-window own-density term h1, accumulate
            # -A_h1^T sum_{h2 != h1} A_h2 lat(k + h1 - h2) into b.
            for h1 in range(m + 1):
                t_own = k + h1
                if t_own < m or t_own > k_len - 1:
                    continue
                if not interior:
                    prec_k += ata[h1]
                for i in range(q):
                    v[i] = 0.0
                for h2 in range(m + 1):
                    if h2 == h1:
                        continue
                    idx = k + h1 - h2
                    if h2 == 0:
                        for i in range(q):
                            v[i] -= lat[s, i, idx]
                    else:
                        blk = a[:, (h2 - 1) * q:h2 * q]
                        for i in range(q):
                            acc = 0.0
                            for j in range(q):
                                acc += blk[i, j] * lat[s, j, idx]
                            v[i] += acc
                if h1 == 0:
                    for i in range(q):
                        bvec[i] += v[i]
                else:
                    blk = a[:, (h1 - 1) * q:h1 * q]
                    for i in range(q):
                        acc = 0.0
                        for j in range(q):
                            acc += blk[j, i] * v[j]
                        bvec[i] -= acc
            if interior:
                _draw_canonical(chol_int, bvec, z[s, k], scratch, xout)
            else:
                trace = 0.0
                for i in range(q):
                    trace += prec_k[i, i]
                if trace < 0.05 * q:
                    # Near-improper head boundary (loading and dynamics both
                    # carry ~no information, as in a zero-initialized start):
                    # floor at unit precision, the innovation scale. Healthy
                    # states sit far above this threshold, so the flat-limit
                    # conditional is untouched once the chain has signal.
                    for i in range(q):
                        prec_k[i, i] += 1.0
                if not _chol_spd(prec_k, chol_k):
                    err[s] = 1
                    break
                _draw_canonical(chol_k, bvec, z[s, k], scratch, xout)
            for i in range(q):
                lat[s, i, k] = xout[i]


@njit(cache=True, nogil=True)
def _lag_moments(lat_s, m, sstar, cmat):
    """Lag-stack scatter sum_k M*_k M*_k^T and cross sum_k M_k M*_k^T."""
    q = lat_s.shape[0]
    k_len = lat_s.shape[1]
    mq = m * q
    for i in range(mq):
        for j in range(mq):
            sstar[i, j] = 0.0
    for i in range(q):
        for j in range(mq):
            cmat[i, j] = 0.0
    for k in range(m, k_len):
        for h1 in range(m):
            for i in range(q):
                v1 = lat_s[i, k - 1 - h1]
                for h2 in range(m):
                    for j in range(q):
                        sstar[h1 * q + i, h2 * q + j] += v1 * lat_s[j, k - 1 - h2]
                cidx = h1 * q + i
                for r0 in range(q):
                    cmat[r0, cidx] += lat_s[r0, k] * v1


@njit(cache=True, nogil=True)
def segment_dynamics(seg_ids, lat, seg_group, prec_seg, parent_vec, m, z, out,
                     mean_only, err):
    """Draw (or conditionally average) each segment's dynamics matrix.

    Precision is prior precision plus the Kronecker lift of the (mQ, mQ)
    lag-stack scatter; the lift is filled entrywise so the full Kronecker
    product is never materialized. ``parent_vec`` is the vec'd subject-level
    matrix per segment; ``z`` is (S, m*Q*Q) standard normal.
    """
    q = lat.shape[1]
    mq = m * q
    la = mq * q
    for si in range(seg_ids.shape[0]):
        s = seg_ids[si]
        g = seg_group[s]
        sstar = np.empty((mq, mq))
        cmat = np.empty((q, mq))
        _lag_moments(lat[s], m, sstar, cmat)
        prec = prec_seg[g].copy()
        for c1 in range(mq):
            for c2 in range(mq):
                val = sstar[c1, c2]
                for r0 in range(q):
                    prec[c1 * q + r0, c2 * q + r0] += val
        bvec = np.dot(prec_seg[g], parent_vec[s])
        for c1 in range(mq):
            for r0 in range(q):
                bvec[c1 * q + r0] += cmat[r0, c1]
        chol = np.empty((la, la))
        if not _chol_spd(prec, chol):
            err[s] = 1
            continue
        scratch = np.empty(la)
        xout = np.empty(la)
        if mean_only:
            zz = np.zeros(la)
            _draw_canonical(chol, bvec, zz, scratch, xout)
        else:
            _draw_canonical(chol, bvec, z[s], scratch, xout)
        for c1 in range(mq):
            for r0 in range(q):
                out[s, r0, c1] = xout[c1 * q + r0]


@njit(cache=True, nogil=True)
def segment_loading(seg_ids, y, lat, seg_group, prec_seg, parent_low, noise_var,
                    frows, fcols, z, out, mean_only, err):
    """Draw (or conditionally average) each segment's loading matrix.

    Works on the lower-triangular coordinates: the likelihood block
    [{sum_k M M^T} (x) I_P] restricted to the free index set couples entries
    only when they share a channel row, so the restricted precision is filled
    entrywise from the (Q, Q) latent scatter. ``z`` is (S, Lt).
    """
    lt = frows.shape[0]
    for si in range(seg_ids.shape[0]):
        s = seg_ids[si]
        g = seg_group[s]
        inv_s2 = 1.0 / noise_var[s]
        sm = np.dot(lat[s], lat[s].T)          # (Q, Q)
        gmat = np.dot(y[s], lat[s].T)          # (P, Q)
        prec = prec_seg[g].copy()
        for i in range(lt):
            ri = frows[i]
            ci = fcols[i]
            for j in range(lt):
                if frows[j] == ri:
                    prec[i, j] += inv_s2 * sm[ci, fcols[j]]
        bvec = np.dot(prec_seg[g], parent_low[s])
        for i in range(lt):
            bvec[i] += inv_s2 * gmat[frows[i], fcols[i]]
        chol = np.empty((lt, lt))
        if not _chol_spd(prec, chol):
            err[s] = 1
            continue
        scratch = np.empty(lt)
        xout = np.empty(lt)
        if mean_only:
            zz = np.zeros(lt)
            _draw_canonical(chol, bvec, zz, scratch, xout)
        else:
            _draw_canonical(chol, bvec, z[s], scratch, xout)
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                out[s, i, j] = 0.0
        for i in range(lt):
            out[s, frows[i], fcols[i]] = xout[i]


@njit(cache=True, nogil=True)
def segment_noise_var(seg_ids, y, lat, loading, a0, b0, gamma_std, out, mean_only):
    """Conjugate inverse-gamma update of each segment's sensor noise variance.

    ``gamma_std`` holds standard Gamma(a0 + PK/2, 1) draws; the inverse-gamma
    draw is rate/gamma. ``mean_only`` returns rate/(shape-1) instead.
    """
    p = y.shape[1]
    k_len = y.shape[2]
    for si in range(seg_ids.shape[0]):
        s = seg_ids[si]
        resid = y[s] - np.dot(loading[s], lat[s])
        ssr = np.sum(resid * resid)
        shape = a0 + 0.5 * p * k_len
        rate = b0 + 0.5 * ssr
        if mean_only:
            out[s] = rate / (shape - 1.0)
        else:
            out[s] = rate / gamma_std[s]


@njit(cache=True, nogil=True)
def segment_moments(seg_ids, y, lat, m, out_sm, out_g, out_sstar, out_c):
    """Sufficient statistics per segment for collapsed/shared updates."""
    for si in range(seg_ids.shape[0]):
        s = seg_ids[si]
        out_sm[s] = np.dot(lat[s], lat[s].T)
        out_g[s] = np.dot(y[s], lat[s].T)
        _lag_moments(lat[s], m, out_sstar[s], out_c[s])


@njit(cache=True, nogil=True)
def segment_loglik(seg_ids, y, lat, loading, dyn, noise_var, m, tau_init,
                   out_sensor, out_state):
    """Per-segment Gaussian log-densities: sensor term and state term.

    The state term covers timepoints m+1..K (unit innovation covariance); the
    first m points contribute only when a proper init precision is set.
    """
    log2pi = 1.8378770664093453
    p = y.shape[1]
    q = lat.shape[1]
    k_len = y.shape[2]
    for si in range(seg_ids.shape[0]):
        s = seg_ids[si]
        sigma2 = noise_var[s]
        resid = y[s] - np.dot(loading[s], lat[s])
        ssr = np.sum(resid * resid)
        out_sensor[s] = -0.5 * p * k_len * (log2pi + np.log(sigma2)) - 0.5 * ssr / sigma2
        state_resid = lat[s][:, m:].copy()
        for h in range(1, m + 1):
            blk = np.ascontiguousarray(dyn[s][:, (h - 1) * q:h * q])
            state_resid -= np.dot(blk, np.ascontiguousarray(lat[s][:, m - h:k_len - h]))
        sse = np.sum(state_resid * state_resid)
        state = -0.5 * (k_len - m) * q * log2pi - 0.5 * sse
        if tau_init > 0.0:
            init_ss = 0.0
            for kk in range(m):
                for i in range(q):
                    init_ss += lat[s, i, kk] * lat[s, i, kk]
            state += 0.5 * m * q * (np.log(tau_init) - log2pi) - 0.5 * tau_init * init_ss
        out_state[s] = state
