"""Synthetic hierarchical datasets with known ground truth.

Generation order mirrors the model: group dynamics/loadings are given,
subject- and segment-level matrices are drawn around their parents, latent
trajectories follow the vector autoregression with identity innovation
covariance, and channels are loaded plus white noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import companion_matrix, low, low_len, spectral_radius, unlow, LowerIndexMap
from .model import ChainState, HierDataset, ModelSpec, state_template
from .rng import Substreams

__all__ = [
    "SimScenario",
    "smooth_loading",
    "dyn_var_table",
    "simulate_mvar",
    "simulate_hierarchy",
    "relative_estimation_error",
]


def smooth_loading(n_channels: int, n_latent: int, pin: float = 0.5) -> np.ndarray:
    """Smooth decaying loading columns, lower-triangular, entry (1,1) pinned.

    Column q is a Gaussian bump over channels centered progressively deeper,
    with mildly decaying amplitude so later latent columns carry less signal.
    The whole matrix is rescaled so the first entry equals ``pin``.
    """
    p, q = n_channels, n_latent
    rows = np.arange(p)[:, None]
    centers = np.linspace(0, 0.7 * (p - 1), q)[None, :]
    width = max(p / 3.0, 2.0)
    amp = 1.0 / (1.0 + 0.25 * np.arange(q))[None, :]
    theta = amp * np.exp(-0.5 * ((rows - centers) / width) ** 2)
    theta *= rows >= np.arange(q)[None, :]
    return theta * (pin / theta[0, 0])


def dyn_var_table(n_latent: int, ar_order: int, diag_by_lag: list[float],
                  offdiag: float) -> np.ndarray:
    """Per-entry variance table for a (Q, m*Q) dynamics matrix.

    ``diag_by_lag[h]`` is the variance of the lag-(h+1) diagonal entries,
    ``offdiag`` the common off-diagonal variance.
    """
    if len(diag_by_lag) != ar_order:
        raise ValueError("need one diagonal variance per lag")
    q = n_latent
    table = np.full((q, ar_order * q), float(offdiag))
    for h in range(ar_order):
        table[np.arange(q), h * q + np.arange(q)] = diag_by_lag[h]
    return table


@dataclass
class SimScenario:
    """Everything needed to generate one synthetic hierarchical dataset.

    Dynamics dispersion tables hold per-entry variances (diagonal covariance
    at both hierarchy levels); loading dispersions are isotropic. When
    ``loading`` is None a synthetic smooth loading matrix is generated.
    """

    n_groups: int
    subjects_per_group: list[int]
    segments_per_subject: int
    n_timepoints: int
    n_channels: int
    n_latent: int
    ar_order: int
    group_dynamics: np.ndarray                 # (R, Q, m*Q)
    loading: np.ndarray | None = None          # (P, Q); synthetic when None
    sd_load_seg: float = 0.04
    sd_load_subj: float = 0.075
    var_dyn_seg: np.ndarray | None = None      # (Q, m*Q) per-entry variances
    var_dyn_subj: np.ndarray | None = None
    noise_var_group: list[float] | None = None  # sigma^2 per group
    warmup: int = 500
    stationarity: str = "allow"                # "allow" | "reject"
    max_redraws: int = 100

    def __post_init__(self):
        self.group_dynamics = np.asarray(self.group_dynamics, dtype=np.float64)
        q, m = self.n_latent, self.ar_order
        if self.group_dynamics.shape != (self.n_groups, q, m * q):
            raise ValueError(
                f"group_dynamics shape {self.group_dynamics.shape} != {(self.n_groups, q, m * q)}"
            )
        if self.loading is None:
            self.loading = smooth_loading(self.n_channels, q)
        self.loading = np.asarray(self.loading, dtype=np.float64)
        # Defaults replicate the reference experiments: per-lag diagonal sds
        # (0.08, 0.04) segment / (0.10, 0.05) subject, off-diagonals 0.03.
        if self.var_dyn_seg is None:
            sds = ([0.08, 0.04] + [0.03] * m)[:m]
            self.var_dyn_seg = dyn_var_table(q, m, [s ** 2 for s in sds], 0.03 ** 2)
        if self.var_dyn_subj is None:
            sds = ([0.10, 0.05] + [0.03] * m)[:m]
            self.var_dyn_subj = dyn_var_table(q, m, [s ** 2 for s in sds], 0.03 ** 2)
        self.var_dyn_seg = np.asarray(self.var_dyn_seg, dtype=np.float64)
        self.var_dyn_subj = np.asarray(self.var_dyn_subj, dtype=np.float64)
        if self.noise_var_group is None:
            self.noise_var_group = [0.16] * self.n_groups
        if self.sd_load_seg < 0 or self.sd_load_subj < 0:
            raise ValueError("loading dispersions must be >= 0")
        if any(v <= 0 for v in self.noise_var_group):
            raise ValueError("noise variances must be positive")
        if self.stationarity not in ("allow", "reject"):
            raise ValueError("stationarity policy must be 'allow' or 'reject'")
        if (self.var_dyn_seg < 0).any() or (self.var_dyn_subj < 0).any():
            raise ValueError("dynamics variance tables must be >= 0")

    @property
    def spec(self) -> ModelSpec:
        return ModelSpec(n_latent=self.n_latent, ar_order=self.ar_order)


def simulate_mvar(dyn: np.ndarray, ar_order: int, n_timepoints: int,
                  rng: np.random.Generator, warmup: int = 500) -> np.ndarray:
    """Run the latent recursion with unit-variance innovations.

    Starts from zero, discards ``warmup`` steps, returns a (Q, K) trajectory.
    Raises if the trajectory blows up to non-finite values.
    """
    dyn = np.asarray(dyn, dtype=np.float64)
    q = dyn.shape[0]
    m = ar_order
    total = warmup + n_timepoints
    innov = rng.standard_normal((total, q))
    traj = np.zeros((total + m, q))
    for t in range(total):
        acc = innov[t].copy()
        for h in range(m):
            acc += dyn[:, h * q:(h + 1) * q] @ traj[t + m - 1 - h]
        traj[t + m] = acc
    out = traj[m + warmup:].T
    if not np.isfinite(out).all():
        raise FloatingPointError("latent trajectory diverged (non-stationary dynamics?)")
    return np.ascontiguousarray(out)


def _draw_dynamics(parent: np.ndarray, var_table: np.ndarray, rng: np.random.Generator,
                   policy: str, ar_order: int, max_redraws: int) -> np.ndarray:
    for attempt in range(max_redraws + 1):
        draw = parent + np.sqrt(var_table) * rng.standard_normal(parent.shape)
        if policy == "allow":
            return draw
        if spectral_radius(companion_matrix(draw, ar_order)) < 1.0:
            return draw
    raise RuntimeError(f"stationarity policy 'reject' exhausted {max_redraws} redraws")


def simulate_hierarchy(sc: SimScenario, seed: int) -> tuple[HierDataset, ChainState]:
    """Generate a dataset plus the true parameter state used to produce it."""
    streams = Substreams(seed)
    q, m, p, k = sc.n_latent, sc.ar_order, sc.n_channels, sc.n_timepoints
    fmap = LowerIndexMap.build(p, q)
    lt = len(fmap)

    spec = sc.spec
    n_subj = sum(sc.subjects_per_group)
    subj_group = np.concatenate([
        np.full(n, r, dtype=np.int64) for r, n in enumerate(sc.subjects_per_group)
    ])
    seg_subject = np.repeat(np.arange(n_subj), sc.segments_per_subject)
    seg_group = subj_group[seg_subject]
    n_seg = seg_subject.size

    y = np.empty((n_seg, p, k))
    ds_stub = HierDataset(y, seg_subject, seg_group, subj_group)
    truth = state_template(ds_stub, spec)

    truth.load_grp[:] = sc.loading
    truth.dyn_grp[:] = sc.group_dynamics
    truth.load_pop[:] = sc.loading
    truth.dyn_pop[:] = sc.group_dynamics.mean(axis=0)

    load_grp_low = low(sc.loading)
    s_idx = 0
    for u in range(n_subj):
        r = int(subj_group[u])
        rng_u = streams.stream("sim_loading", unit=u)
        subj_low = load_grp_low + sc.sd_load_subj * rng_u.standard_normal(lt)
        truth.load_subj[u] = unlow(subj_low, p, q)
        rng_a = streams.stream("sim_dynamics", unit=u)
        truth.dyn_subj[u] = _draw_dynamics(
            truth.dyn_grp[r], sc.var_dyn_subj, rng_a, sc.stationarity, m, sc.max_redraws
        )
        for _ in range(sc.segments_per_subject):
            s = s_idx
            seg_low = low(truth.load_subj[u]) + sc.sd_load_seg * rng_u.standard_normal(lt)
            truth.load_seg[s] = unlow(seg_low, p, q)
            truth.dyn_seg[s] = _draw_dynamics(
                truth.dyn_subj[u], sc.var_dyn_seg, rng_a, sc.stationarity, m, sc.max_redraws
            )
            rng_m = streams.stream("sim_latent", unit=s)
            traj = simulate_mvar(truth.dyn_seg[s], m, k, rng_m, warmup=sc.warmup)
            truth.latent[s] = traj
            sigma2 = float(sc.noise_var_group[r])
            truth.noise_var[s] = sigma2
            rng_e = streams.stream("sim_sensor_noise", unit=s)
            y[s] = truth.load_seg[s] @ traj + np.sqrt(sigma2) * rng_e.standard_normal((p, k))
            s_idx += 1

    ds = HierDataset(y, seg_subject, seg_group, subj_group)
    return ds, truth


def relative_estimation_error(truth: np.ndarray, estimate: np.ndarray) -> float:
    """Scale-free error || truth - estimate ||_2 / || truth ||_2."""
    t = np.asarray(truth, dtype=np.float64).ravel()
    e = np.asarray(estimate, dtype=np.float64).ravel()
    denom = np.linalg.norm(t)
    if denom == 0:
        raise ValueError("relative estimation error undefined for zero-norm truth")
    return float(np.linalg.norm(t - e) / denom)
