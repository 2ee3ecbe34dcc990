"""Model-selection criteria, posterior summaries, chain diagnostics and
directional connectivity.

Everything here is a pure function of stored draws; nothing consumes
randomness.
"""

from __future__ import annotations

import numpy as np
import pandas as pd
import scipy.linalg
from scipy.stats import norm

from .linalg import dynamics_blocks
from .model import HierDataset

__all__ = [
    "complete_loglik",
    "sensor_loglik",
    "compute_cdic",
    "compute_dic_variants",
    "autocorrelation",
    "effective_sample_size",
    "summarize_draws",
    "summarize",
    "group_contrast",
    "connectivity",
    "connectivity_set",
    "connectivity_edges",
]

_LOG2PI = float(np.log(2.0 * np.pi))


def sensor_loglik(y: np.ndarray, denoised: np.ndarray, noise_var: np.ndarray) -> float:
    """Gaussian sensor log-density of (S, P, K) data around its noise-free part."""
    s, p, k = y.shape
    resid = y - denoised
    ssr = np.einsum("spk,spk->s", resid, resid)
    return float(np.sum(-0.5 * p * k * (_LOG2PI + np.log(noise_var)) - 0.5 * ssr / noise_var))


def complete_loglik(ds: HierDataset, latent: np.ndarray, loading: np.ndarray,
                    dyn: np.ndarray, noise_var: np.ndarray, ar_order: int,
                    tau_init: float = 0.0) -> float:
    """Complete-data log-likelihood: sensor term over all timepoints plus the
    latent autoregression term over timepoints m+1..K (unit innovations).

    Reference implementation in plain numpy; the engine's kernel path is
    tested against it.
    """
    q = latent.shape[1]
    k_len = latent.shape[2]
    m = ar_order
    denoised = np.einsum("spq,sqk->spk", loading, latent)
    total = sensor_loglik(ds.y, denoised, noise_var)
    pred = np.zeros_like(latent[:, :, m:])
    for h in range(1, m + 1):
        blocks = dyn[:, :, (h - 1) * q:h * q]
        pred += np.einsum("sij,sjk->sik", blocks, latent[:, :, m - h:k_len - h])
    resid = latent[:, :, m:] - pred
    sse = float(np.sum(resid * resid))
    total += -0.5 * latent.shape[0] * (k_len - m) * q * _LOG2PI - 0.5 * sse
    if tau_init > 0.0:
        init = latent[:, :, :m]
        total += (0.5 * init.size * (np.log(tau_init) - _LOG2PI)
                  - 0.5 * tau_init * float(np.sum(init * init)))
    return total


def compute_cdic(output) -> float:
    """Complete-data information criterion from the stored traces.

    -4 E[log p(Y, M | params)] + 2 E[log p(Y, M | conditional-mean params)],
    both expectations over the kept draws.
    """
    complete = np.asarray(output.loglik["complete"])
    plugin = np.asarray(output.loglik["plugin_complete"])
    if complete.size == 0:
        raise ValueError("no kept draws")
    return float(-4.0 * complete.mean() + 2.0 * plugin.mean())


def compute_dic_variants(output, ds: HierDataset) -> dict[str, float]:
    """Conditional-likelihood criteria DIC1/DIC2/DIC3 with their penalties.

    The conditional parameter set is (denoised signal, noise variance); its
    posterior mean is plugged into the deviance. DIC1 adds 2 p_D, DIC2 3 p_D,
    DIC3 uses the variance-based p_V = 2 Var[log p(Y | .)].
    """
    cond = np.asarray(output.loglik["conditional"])
    if cond.size == 0:
        raise ValueError("no kept draws")
    d_bar = -2.0 * cond.mean()
    d_hat = -2.0 * sensor_loglik(ds.y, output.seg_means["denoised"],
                                 output.seg_means["noise_var"])
    p_d = d_bar - d_hat
    p_v = 2.0 * (float(np.var(cond, ddof=1)) if cond.size > 1 else 0.0)
    return {
        "DIC1": d_hat + 2.0 * p_d,
        "DIC2": d_hat + 3.0 * p_d,
        "DIC3": d_hat + 2.0 * p_v,
        "p_d": p_d,
        "p_v": p_v,
        "deviance_at_mean": d_hat,
    }


def autocorrelation(x: np.ndarray, max_lag: int | None = None) -> np.ndarray:
    """Autocorrelation function by FFT autocovariance; lag 0 first."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if max_lag is None:
        max_lag = n - 1
    centered = x - x.mean()
    nfft = int(2 ** np.ceil(np.log2(2 * n)))
    fx = np.fft.rfft(centered, nfft)
    acov = np.fft.irfft(fx * np.conjugate(fx), nfft)[:max_lag + 1] / n
    if acov[0] <= 0:
        out = np.zeros(max_lag + 1)
        out[0] = 1.0
        return out
    return acov / acov[0]


def effective_sample_size(x: np.ndarray) -> float:
    """ESS = L / (1 + 2 sum rho_l), truncating the sum at the end of the
    initial positive sequence of paired autocorrelations."""
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n < 2 or np.allclose(x, x[0]):
        return float(n)
    rho = autocorrelation(x)
    tau = 1.0
    t = 1
    while t + 1 < rho.size:
        pair = rho[t] + rho[t + 1]
        if pair <= 0.0:
            break
        tau += 2.0 * pair
        t += 2
    return float(min(n, n / tau))


def _entry_labels(shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    return [tuple(int(i) for i in idx) for idx in np.ndindex(*shape)]


def summarize_draws(draws: np.ndarray, level: float = 0.95,
                    acf_lags: tuple[int, ...] = (1,)) -> pd.DataFrame:
    """Per-entry posterior summary of an (L, ...) draw array.

    Both interval styles are reported: the normal approximation
    mean +/- z * sd and the matching sample quantiles.
    """
    draws = np.asarray(draws, dtype=np.float64)
    n_kept = draws.shape[0]
    flat = draws.reshape(n_kept, -1)
    mean = flat.mean(axis=0)
    sd = flat.std(axis=0, ddof=1) if n_kept > 1 else np.zeros(flat.shape[1])
    z = norm.ppf(0.5 + level / 2.0)
    alpha = 1.0 - level
    qlo = np.quantile(flat, alpha / 2.0, axis=0)
    qhi = np.quantile(flat, 1.0 - alpha / 2.0, axis=0)
    rows = []
    for j, idx in enumerate(_entry_labels(draws.shape[1:])):
        ess = effective_sample_size(flat[:, j])
        acfs = autocorrelation(flat[:, j], max_lag=max(acf_lags)) if n_kept > max(acf_lags) \
            else np.ones(max(acf_lags) + 1)
        row = {
            "index": idx,
            "mean": mean[j],
            "sd": sd[j],
            "ci_norm_lo": mean[j] - z * sd[j],
            "ci_norm_hi": mean[j] + z * sd[j],
            "ci_q_lo": qlo[j],
            "ci_q_hi": qhi[j],
            "ess": ess,
        }
        for lag in acf_lags:
            row[f"acf_{lag}"] = float(acfs[lag]) if not np.allclose(sd[j], 0) else 0.0
        rows.append(row)
    return pd.DataFrame(rows)


_DEFAULT_SUMMARY_PARAMS = ("dyn_pop", "dyn_grp", "dyn_subj", "load_pop", "load_grp", "load_subj")


def summarize(output, parameters: tuple[str, ...] = _DEFAULT_SUMMARY_PARAMS,
              level: float = 0.95) -> pd.DataFrame:
    """Long-format posterior summary over the kept draws of ``output``."""
    frames = []
    for name in parameters:
        if name not in output.draws:
            raise KeyError(f"unknown draw array {name!r}")
        df = summarize_draws(output.draws[name], level=level)
        df.insert(0, "parameter", name)
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def draws_long_table(output, parameters: tuple[str, ...] = ("dyn_grp", "load_grp")) -> pd.DataFrame:
    """Plot-ready long table: (parameter, draw index, entry index, value)."""
    rows = []
    for name in parameters:
        arr = output.draws[name]
        flat = arr.reshape(arr.shape[0], -1)
        labels = _entry_labels(arr.shape[1:])
        for l in range(flat.shape[0]):
            for j, idx in enumerate(labels):
                rows.append((name, l, str(idx), flat[l, j]))
    return pd.DataFrame(rows, columns=["parameter", "draw", "index", "value"])


def group_contrast(output, weights, param: str = "dynamics", level: float = 0.95,
                   bonferroni: bool = False, ci: str = "normal") -> pd.DataFrame:
    """Posterior summary of the weighted group combination sum_r w_r X_r.

    Flags entries whose credible interval excludes zero; ``bonferroni``
    divides the nominal miss probability by the number of entries.
    """
    key = {"dynamics": "dyn_grp", "loading": "load_grp"}[param]
    arr = output.draws[key]
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size != arr.shape[1]:
        raise ValueError(f"got {weights.size} weights for {arr.shape[1]} groups")
    contrast = np.tensordot(arr, weights, axes=(1, 0))
    n_entries = int(np.prod(contrast.shape[1:]))
    eff_level = 1.0 - (1.0 - level) / n_entries if bonferroni else level
    df = summarize_draws(contrast, level=eff_level)
    lo, hi = ("ci_q_lo", "ci_q_hi") if ci == "quantile" else ("ci_norm_lo", "ci_norm_hi")
    df["excludes_zero"] = (df[lo] > 0) | (df[hi] < 0)
    df.insert(0, "parameter", f"contrast_{param}")
    return df


def connectivity(loading: np.ndarray, dyn: np.ndarray, ar_order: int = 1) -> np.ndarray:
    """Directional channel-space maps B_h = L A_h (L^T L)^-1 L^T per lag.

    Computed through a Cholesky solve of the loading Gram matrix, never an
    explicit inverse. Raises on rank-deficient loadings.
    """
    loading = np.asarray(loading, dtype=np.float64)
    gram = loading.T @ loading
    try:
        cf = scipy.linalg.cho_factor(gram, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("loading matrix is rank deficient") from exc
    proj = scipy.linalg.cho_solve(cf, loading.T)      # (Q, P)
    out = np.empty((ar_order, loading.shape[0], loading.shape[0]))
    for h, block in enumerate(dynamics_blocks(np.asarray(dyn, dtype=np.float64), ar_order)):
        out[h] = loading @ block @ proj
    return out


def connectivity_set(output) -> dict[str, np.ndarray]:
    """Connectivity matrices from posterior means at every level.

    Segment level uses the running means, subject/group levels the means of
    the kept draws. Shapes: (units, m, P, P); group also gets per-draw
    matrices (L, R, m, P, P) for interval work.
    """
    m = output.ar_order
    seg_load = output.seg_means["load_seg"]
    seg_dyn = output.seg_means["dyn_seg"]
    seg = np.stack([connectivity(seg_load[s], seg_dyn[s], m)
                    for s in range(seg_load.shape[0])])
    subj_load = output.draws["load_subj"].mean(axis=0)
    subj_dyn = output.draws["dyn_subj"].mean(axis=0)
    subj = np.stack([connectivity(subj_load[u], subj_dyn[u], m)
                     for u in range(subj_load.shape[0])])
    grp_load = output.draws["load_grp"].mean(axis=0)
    grp_dyn = output.draws["dyn_grp"].mean(axis=0)
    grp = np.stack([connectivity(grp_load[r], grp_dyn[r], m)
                    for r in range(grp_load.shape[0])])
    n_kept, n_groups = output.draws["load_grp"].shape[:2]
    per_draw = np.stack([
        np.stack([connectivity(output.draws["load_grp"][l, r],
                               output.draws["dyn_grp"][l, r], m)
                  for r in range(n_groups)])
        for l in range(n_kept)
    ])
    return {"segment": seg, "subject": subj, "group": grp, "group_draws": per_draw}


def connectivity_edges(b: np.ndarray, threshold: float = 0.05) -> pd.DataFrame:
    """Thresholded edge list of one (P, P) connectivity matrix.

    Entry (to, from) maps the lagged source channel (column) onto the target
    channel (row); edges below ``threshold`` in magnitude are dropped.
    """
    b = np.asarray(b)
    keep = np.argwhere(np.abs(b) >= threshold)
    rows = [(int(c), int(r), float(b[r, c])) for r, c in keep]
    return pd.DataFrame(rows, columns=["source", "target", "weight"])
