"""Simulation experiment harnesses: coverage, sign identification, latent
dimension selection, restricted-mode comparison and performance.

Replicates run in a process-level worker pool with isolated seeds. Scoring
against a known truth first aligns the global sign of each latent column
(one flip per column, decided by the population-level loading posterior mean)
since the model identifies columns only up to sign; loadings and latents flip
directly, dynamics draws are conjugated.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .diagnostics import compute_cdic, compute_dic_variants
from .engine import GibbsEngine, run_chain
from .linalg import LowerIndexMap
from .model import HierDataset, Hyperparams, MCMCSchedule, ModelSpec, default_hyperparams
from .simulate import SimScenario, simulate_hierarchy

__all__ = [
    "two_group_truth",
    "column_signs",
    "align_loading",
    "align_dynamics",
    "run_coverage_experiment",
    "run_sign_experiment",
    "run_dic_experiment",
    "run_restricted_experiment",
    "run_perf_experiment",
]


def scenario_from_config(cfg: dict) -> SimScenario:
    """Build a simulation scenario from a config mapping (CLI surface)."""
    q = int(cfg["q"])
    m = int(cfg.get("m", 1))
    groups = int(cfg.get("groups", 1))
    dyn = cfg.get("dynamics", "two_group")
    if isinstance(dyn, str):
        if dyn == "two_group":
            truth = two_group_truth(q)[:groups]
            if m != 2:
                raise ValueError("the built-in two_group dynamics require m=2")
        elif dyn == "control":
            if m == 2:
                truth = np.broadcast_to(two_group_truth(q)[1], (groups, q, m * q)).copy()
            else:
                base = np.hstack([np.diag(np.linspace(0.9, 0.7, q))] +
                                 [np.zeros((q, q))] * (m - 1))
                truth = np.broadcast_to(base, (groups, q, m * q)).copy()
        else:
            raise ValueError(f"unknown dynamics preset {dyn!r}")
    else:
        truth = np.asarray(dyn, dtype=np.float64)
    subjects = cfg["subjects"]
    if isinstance(subjects, int):
        subjects = [subjects] * groups
    return SimScenario(
        n_groups=groups,
        subjects_per_group=list(subjects),
        segments_per_subject=int(cfg["segments"]),
        n_timepoints=int(cfg["timepoints"]),
        n_channels=int(cfg["channels"]),
        n_latent=q,
        ar_order=m,
        group_dynamics=truth,
        sd_load_seg=float(cfg.get("sd_load_seg", 0.04)),
        sd_load_subj=float(cfg.get("sd_load_subj", 0.075)),
        noise_var_group=cfg.get("noise_var"),
        warmup=int(cfg.get("warmup", 500)),
        stationarity=cfg.get("stationarity", "allow"),
    )


def two_group_truth(n_latent: int = 2) -> np.ndarray:
    """Two-group order-2 dynamics truth used across the simulation studies.

    Group 0 carries per-state lag-1 diagonals from 0.95 down to 0.90 and
    lag-2 diagonals from -0.55 down to -0.50; group 1 is (I, -0.6 I), so the
    diagonal group differences are 0.05..0.10 per lag.
    """
    q = n_latent
    a0 = np.hstack([np.diag(np.linspace(0.95, 0.90, q)), np.diag(np.linspace(-0.55, -0.50, q))])
    a1 = np.hstack([np.eye(q), -0.6 * np.eye(q)])
    return np.stack([a0, a1])


# ------------------------------------------------------------- sign alignment

def column_signs(load_pop_mean: np.ndarray, truth_load_pop: np.ndarray) -> np.ndarray:
    """One +-1 per latent column: sign of <estimated column, truth column>."""
    dots = np.einsum("pq,pq->q", load_pop_mean, truth_load_pop)
    return np.where(dots >= 0, 1.0, -1.0)


def align_loading(arr: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Flip loading columns (last axis) by the per-column signs."""
    return arr * signs


def align_dynamics(arr: np.ndarray, signs: np.ndarray, ar_order: int) -> np.ndarray:
    """Conjugate dynamics matrices by the sign matrix: entry (i, j) of every
    lag block picks up s_i * s_j."""
    q = signs.size
    factor = np.concatenate([np.outer(signs, signs)] * ar_order, axis=1)
    return arr * factor


def _normal_ci_covers(draws: np.ndarray, truth: np.ndarray, z: float = 1.959963984540054):
    mean = draws.mean(axis=0)
    sd = draws.std(axis=0, ddof=1)
    return (truth >= mean - z * sd) & (truth <= mean + z * sd)


# ------------------------------------------------------------------- coverage

def _coverage_replicate(args) -> dict:
    scenario, spec, hyper, schedule, seed, n_threads = args
    ds, truth = simulate_hierarchy(scenario, seed)
    out = run_chain(ds, spec, hyper, schedule, seed=seed + 1, n_threads=n_threads)
    fmap = LowerIndexMap.build(ds.n_channels, spec.n_latent)
    signs = column_signs(out.draws["load_pop"].mean(axis=0), truth.load_pop)

    dyn_grp = align_dynamics(out.draws["dyn_grp"], signs, spec.ar_order)
    load_grp = align_loading(out.draws["load_grp"], signs)
    dyn_subj = align_dynamics(out.draws["dyn_subj"], signs, spec.ar_order)
    load_subj = align_loading(out.draws["load_subj"], signs)

    cover_dyn_grp = _normal_ci_covers(dyn_grp, truth.dyn_grp)
    cover_load_grp = _normal_ci_covers(load_grp, truth.load_grp)[:, fmap.rows, fmap.cols]
    cover_dyn_subj = _normal_ci_covers(dyn_subj, truth.dyn_subj)
    cover_load_subj = _normal_ci_covers(load_subj, truth.load_subj)[:, fmap.rows, fmap.cols]

    # Group-difference flags (group 1 minus group 0), normal-approximation CI.
    diff = dyn_grp[:, 1] - dyn_grp[:, 0]
    mean = diff.mean(axis=0)
    sd = diff.std(axis=0, ddof=1)
    excludes_zero = (mean - 1.959963984540054 * sd > 0) | (mean + 1.959963984540054 * sd < 0)

    q = spec.n_latent
    diag_mask = np.zeros((q, spec.ar_order * q), dtype=bool)
    for h in range(spec.ar_order):
        diag_mask[np.arange(q), h * q + np.arange(q)] = True
    truth_diff = truth.dyn_grp[1] - truth.dyn_grp[0]
    true_gap = np.abs(truth_diff) > 1e-12

    return {
        "cover_dyn_grp": cover_dyn_grp,
        "cover_load_grp": cover_load_grp,
        "cover_dyn_subj": cover_dyn_subj,
        "cover_load_subj": cover_load_subj,
        "flags": excludes_zero,
        "diag_mask": diag_mask,
        "true_gap": true_gap,
        "seconds": out.timings.get("total", 0.0),
    }


def _pool_map(worker, arg_list, n_workers: int):
    if n_workers <= 1:
        return [worker(a) for a in arg_list]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(worker, arg_list))


def run_coverage_experiment(scenario: SimScenario, spec: ModelSpec, hyper: Hyperparams,
                            schedule: MCMCSchedule, n_rep: int, seed: int = 0,
                            n_workers: int = 1, n_threads: int = 1) -> dict:
    """Replicated simulate+fit coverage study with group-difference flags."""
    args = [(scenario, spec, hyper, schedule, seed + 1000 * r, n_threads)
            for r in range(n_rep)]
    results = _pool_map(_coverage_replicate, args, n_workers)
    diag_mask = results[0]["diag_mask"]
    true_gap = results[0]["true_gap"]
    flags = np.stack([r["flags"] for r in results])
    true_diag = diag_mask & true_gap
    n_true_flagged = flags[:, true_diag].sum(axis=1)
    offdiag_fp = flags[:, ~diag_mask & ~true_gap]
    report = {
        "n_rep": n_rep,
        "coverage_dyn_grp": float(np.mean([r["cover_dyn_grp"] for r in results])),
        "coverage_load_grp": float(np.mean([r["cover_load_grp"] for r in results])),
        "coverage_dyn_subj": float(np.mean([r["cover_dyn_subj"] for r in results])),
        "coverage_load_subj": float(np.mean([r["cover_load_subj"] for r in results])),
        "coverage_dyn_grp_entries": np.mean([r["cover_dyn_grp"] for r in results], axis=0).tolist(),
        "n_true_diag_diffs": int(true_diag.sum()),
        "replicates_with_2plus_true_flags": float(np.mean(n_true_flagged >= 2)),
        "true_flag_counts": n_true_flagged.tolist(),
        "offdiag_false_positive_rate": float(offdiag_fp.mean()) if offdiag_fp.size else 0.0,
        "total_seconds": float(sum(r["seconds"] for r in results)),
    }
    return report


# ----------------------------------------------------------------------- sign

@dataclass
class _SignScore:
    """Online CSIR counting against the per-unit truth columns."""

    truth_seg: np.ndarray
    truth_subj: np.ndarray
    seg_pos: np.ndarray = field(init=False)
    subj_pos: np.ndarray = field(init=False)
    n_iters: int = 0

    def __post_init__(self):
        q = self.truth_seg.shape[2]
        self.seg_pos = np.zeros(q)
        self.subj_pos = np.zeros(q)

    @staticmethod
    def _pos_counts(draw: np.ndarray, truth: np.ndarray) -> np.ndarray:
        dots = np.einsum("upq,upq->uq", draw, truth)
        return (dots >= 0).sum(axis=0).astype(np.float64)

    def __call__(self, state, t):
        self.seg_pos += self._pos_counts(state.load_seg, self.truth_seg)
        self.subj_pos += self._pos_counts(state.load_subj, self.truth_subj)
        self.n_iters += 1

    def rates(self, signs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n_seg = self.truth_seg.shape[0] * max(self.n_iters, 1)
        n_subj = self.truth_subj.shape[0] * max(self.n_iters, 1)
        seg = self.seg_pos / n_seg
        subj = self.subj_pos / n_subj
        seg = np.where(signs > 0, seg, 1.0 - seg)
        subj = np.where(signs > 0, subj, 1.0 - subj)
        return seg, subj


def _sign_replicate(args) -> dict:
    scenario, spec, hyper, schedule, arm, seed, n_threads = args
    ds, truth = simulate_hierarchy(scenario, seed)
    if arm == "two_stage":
        sched = schedule
        init = None
    elif arm == "no_treatment":
        sched = MCMCSchedule(n_iter=schedule.n_iter, n_burnin=schedule.n_burnin,
                             thin=schedule.thin, n_init_iter=0,
                             sign_check_start=0, sign_check_end=0,
                             sign_check_every=schedule.sign_check_every,
                             rho0=schedule.rho0)
        init = np.zeros((ds.n_channels, spec.n_latent))
    else:
        raise ValueError(f"unknown arm {arm!r}")
    scorer = _SignScore(truth.load_seg, truth.load_subj)
    out = run_chain(ds, spec, hyper, sched, seed=seed + 1, n_threads=n_threads,
                    kept_callback=scorer, init_loading=init)
    signs = column_signs(out.draws["load_pop"].mean(axis=0), truth.load_pop)
    csir_seg, csir_subj = scorer.rates(signs)
    mean_seg = align_loading(out.seg_means["load_seg"], signs)
    mean_subj = align_loading(out.draws["load_subj"].mean(axis=0), signs)
    mee_seg = np.linalg.norm(mean_seg - truth.load_seg, axis=1).mean(axis=0)
    mee_subj = np.linalg.norm(mean_subj - truth.load_subj, axis=1).mean(axis=0)
    return {
        "arm": arm,
        "csir_segment": csir_seg,
        "csir_subject": csir_subj,
        "mee_segment": mee_seg,
        "mee_subject": mee_subj,
        "n_flips": out.audit.n_flips(),
    }


def run_sign_experiment(scenario: SimScenario, spec: ModelSpec, hyper: Hyperparams,
                        schedule: MCMCSchedule, n_rep: int, seed: int = 0,
                        arms: tuple[str, ...] = ("two_stage", "no_treatment"),
                        n_workers: int = 1, n_threads: int = 1) -> dict:
    """Sign-identification comparison across treatment arms (per-replicate
    CSIR and mean estimation error at segment and subject level)."""
    args = [(scenario, spec, hyper, schedule, arm, seed + 1000 * r, n_threads)
            for r in range(n_rep) for arm in arms]
    results = _pool_map(_sign_replicate, args, n_workers)
    report: dict = {"n_rep": n_rep, "arms": {}}
    for arm in arms:
        arm_res = [r for r in results if r["arm"] == arm]
        report["arms"][arm] = {
            "csir_segment_mean": float(np.mean([r["csir_segment"].mean() for r in arm_res])),
            "csir_subject_mean": float(np.mean([r["csir_subject"].mean() for r in arm_res])),
            "csir_segment_per_rep": [float(r["csir_segment"].mean()) for r in arm_res],
            "csir_subject_per_rep": [float(r["csir_subject"].mean()) for r in arm_res],
            "mee_segment_per_rep": [float(r["mee_segment"].mean()) for r in arm_res],
            "mee_subject_per_rep": [float(r["mee_subject"].mean()) for r in arm_res],
            "flips": [int(r["n_flips"]) for r in arm_res],
        }
    return report


# ------------------------------------------------------------------ selection

def _dic_replicate(args) -> dict:
    scenario, q_grid, m_grid, schedule, seed, small_kappa, n_threads = args
    ds, _ = simulate_hierarchy(scenario, seed)
    rows = []
    for m_fit in m_grid:
        for q_fit in q_grid:
            spec = ModelSpec(n_latent=q_fit, ar_order=m_fit)
            hyper = default_hyperparams(ds.n_channels, q_fit, m_fit, small_kappa=small_kappa)
            out = run_chain(ds, spec, hyper, schedule, seed=seed + 1, n_threads=n_threads)
            crit = {"q": q_fit, "m": m_fit, "cDIC": compute_cdic(out)}
            crit.update(compute_dic_variants(out, ds))
            rows.append(crit)
    return {"rows": rows}


def run_dic_experiment(scenario: SimScenario, q_grid: tuple[int, ...], m_grid: tuple[int, ...],
                       schedule: MCMCSchedule, n_rep: int, seed: int = 0,
                       small_kappa: float = 1e-3, n_workers: int = 1,
                       n_threads: int = 1) -> dict:
    """Latent-dimension selection study over a (Q, m) fit grid."""
    args = [(scenario, tuple(q_grid), tuple(m_grid), schedule, seed + 1000 * r,
             small_kappa, n_threads) for r in range(n_rep)]
    results = _pool_map(_dic_replicate, args, n_workers)
    return {"n_rep": n_rep, "replicates": [r["rows"] for r in results]}


# ------------------------------------------------------------------ restricted

def _restricted_replicate(args) -> dict:
    scenario, schedule, seed, n_threads = args
    ds, truth = simulate_hierarchy(scenario, seed)
    covers = {}
    for mode in ("full", "fixed_all"):
        spec = ModelSpec(n_latent=scenario.n_latent, ar_order=scenario.ar_order, mode=mode)
        hyper = default_hyperparams(ds.n_channels, scenario.n_latent, scenario.ar_order)
        out = run_chain(ds, spec, hyper, schedule, seed=seed + 1, n_threads=n_threads)
        signs = column_signs(out.draws["load_pop"].mean(axis=0), truth.load_pop)
        dyn_grp = align_dynamics(out.draws["dyn_grp"], signs, scenario.ar_order)
        covers[mode] = _normal_ci_covers(dyn_grp, truth.dyn_grp)
    return covers


def run_restricted_experiment(scenario: SimScenario, schedule: MCMCSchedule, n_rep: int,
                              seed: int = 0, n_workers: int = 1, n_threads: int = 1) -> dict:
    """Full random-effects vs fully-shared fits on the same heterogeneous data."""
    args = [(scenario, schedule, seed + 1000 * r, n_threads) for r in range(n_rep)]
    results = _pool_map(_restricted_replicate, args, n_workers)
    return {
        "n_rep": n_rep,
        "coverage_full": float(np.mean([r["full"] for r in results])),
        "coverage_fixed_all": float(np.mean([r["fixed_all"] for r in results])),
    }


# ------------------------------------------------------------------ perf

def run_perf_experiment(scenario: SimScenario, seed: int = 0, n_threads: int = 1,
                        n_measure: int = 3, reference_cores: int = 25) -> dict:
    """Wall time per main-chain iteration on a given scenario.

    One warm-up sweep precedes timing. ``normalized_seconds`` rescales the
    measured per-iteration time to the reference core count under the linear
    parallel-scaling model (independent units across threads).
    """
    ds, truth = simulate_hierarchy(scenario, seed)
    spec = ModelSpec(n_latent=scenario.n_latent, ar_order=scenario.ar_order)
    hyper = default_hyperparams(ds.n_channels, scenario.n_latent, scenario.ar_order)
    engine = GibbsEngine(ds, spec, hyper, seed=seed, n_threads=n_threads)
    state = engine.initial_state(init_loading=truth.load_pop)
    from concurrent.futures import ThreadPoolExecutor
    from threadpoolctl import threadpool_limits
    engine._warmup_kernels(state)
    with threadpool_limits(limits=1):
        pool = ThreadPoolExecutor(max_workers=n_threads) if n_threads > 1 else None
        engine._pool = pool
        try:
            engine.sweep(state, 1)
            t0 = time.perf_counter()
            for t in range(2, 2 + n_measure):
                engine.sweep(state, t)
            per_iter = (time.perf_counter() - t0) / n_measure
        finally:
            engine._pool = None
            if pool is not None:
                pool.shutdown(wait=True)
    return {
        "per_iter_seconds": float(per_iter),
        "n_threads": n_threads,
        "normalized_seconds": float(per_iter * n_threads / reference_cores),
        "reference_cores": reference_cores,
        "n_segments": ds.n_segments,
    }
