"""Block-Gibbs engine: deterministic, thread-parallel sweeps over the model.

A sweep updates, in order: latent trajectories, segment-level dynamics /
loading / noise variance (internal order configurable), subject level, group
level, population level, variance components. Children always precede
parents. Segment-phase work runs on a thread pool over contiguous segment
chunks; all randomness is pre-generated from counter-based substreams keyed
by (phase, iteration, unit), so results are bitwise-identical for any thread
count. BLAS is pinned to one thread inside the run loop; parallelism lives at
the unit level.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .conditionals import (
    collapsed_dynamics_conditional,
    collapsed_loading_conditional,
    parent_conditional,
    population_conditional,
    varcomp_posterior,
)
from .identify import SignAudit, apply_sign_tracking, run_initialization
from .linalg import LowerIndexMap, low, unlow, unvec, vec
from .model import (
    ChainState,
    HierDataset,
    Hyperparams,
    MCMCSchedule,
    ModelSpec,
    state_template,
    validate,
)
from .rng import DOMAINS, Substreams
from .samplers import sample_canonical_gaussian, sample_wishart_inv_scale

__all__ = ["SweepPlan", "GibbsEngine", "ChainOutput", "run_chain"]

_SEGMENT_PHASES = ("dynamics", "loading", "noise")

# Substream unit tags for barrier-level draws (distinct kinds, same domain).
def _unit(tag: int, idx: int = 0) -> int:
    return (tag << 32) + idx


_T_SUBJ_DYN, _T_SUBJ_LOAD, _T_GRP_DYN, _T_GRP_LOAD = 0, 1, 2, 3
_T_POP_DYN, _T_POP_LOAD, _T_GLOBAL_LOAD = 4, 5, 6
_T_VC_DYN_SEG, _T_VC_DYN_SUBJ, _T_VC_DYN_GRP = 7, 8, 9
_T_VC_LOAD_SEG, _T_VC_LOAD_SUBJ, _T_VC_LOAD_GRP = 10, 11, 12


@dataclass(frozen=True)
class SweepPlan:
    """Phase ordering of one sweep.

    The outer order (latent -> segment -> subject -> group -> population ->
    variance components) is fixed; only the segment-internal order may be
    permuted. Validation guarantees each parameter family appears exactly
    once.
    """

    segment_order: tuple[str, ...] = _SEGMENT_PHASES

    def __post_init__(self):
        if tuple(sorted(self.segment_order)) != tuple(sorted(_SEGMENT_PHASES)):
            raise ValueError(
                f"segment order must be a permutation of {_SEGMENT_PHASES}, got {self.segment_order}"
            )

    @property
    def phases(self) -> tuple[str, ...]:
        return ("latent", *self.segment_order, "subject", "group", "population", "varcomp")


@dataclass
class ChainOutput:
    """Kept draws, running posterior means, traces and the sign audit.

    Group/subject/population parameters and variance-component covariances
    are retained per kept iteration; segment-level parameters and latents are
    summarized by their running posterior means (accumulated post burn-in at
    thinned iterations).
    """

    n_latent: int
    ar_order: int
    mode: str
    seed: int
    kept_iters: np.ndarray
    draws: dict[str, np.ndarray]
    seg_means: dict[str, np.ndarray]
    loglik: dict[str, np.ndarray]
    audit: SignAudit
    timings: dict[str, float]
    schedule: MCMCSchedule
    shape: dict[str, int]

    @property
    def n_kept(self) -> int:
        return int(self.kept_iters.size)


class GibbsEngine:
    """One chain over one dataset; owns no global state."""

    def __init__(self, ds: HierDataset, spec: ModelSpec, hyper: Hyperparams,
                 schedule: MCMCSchedule | None = None, seed: int = 0, n_threads: int = 1,
                 loading_structure: str | None = None, dynamics_structure: str | None = None,
                 tau_pop: float = 0.0, tau_init: float = 0.0,
                 sweep_plan: SweepPlan | None = None, domain_offset: int = 0,
                 progress=None):
        problems = validate(ds, spec)
        if problems:
            raise ValueError("dataset fails validation: " + "; ".join(problems))
        hyper.check(ds.n_channels, spec.n_latent, spec.ar_order)
        self.ds = ds
        self.spec = spec
        self.hyper = hyper
        self.schedule = schedule
        self.seed = int(seed)
        self.n_threads = max(1, int(n_threads))
        self.tau_pop = float(tau_pop)
        self.tau_init = float(tau_init)
        self.plan = sweep_plan or SweepPlan()
        self.progress = progress
        self.domain_offset = int(domain_offset)
        self.streams = Substreams(seed)

        if loading_structure is None:
            loading_structure = "group" if spec.mode in ("fixed_loading", "fixed_all") else "hierarchical"
        if dynamics_structure is None:
            dynamics_structure = "group" if spec.mode == "fixed_all" else "hierarchical"
        if loading_structure not in ("hierarchical", "group", "global"):
            raise ValueError(f"unknown loading structure {loading_structure!r}")
        if dynamics_structure not in ("hierarchical", "group"):
            raise ValueError(f"unknown dynamics structure {dynamics_structure!r}")
        self.loading_structure = loading_structure
        self.dynamics_structure = dynamics_structure

        self.fmap = LowerIndexMap.build(ds.n_channels, spec.n_latent)
        self.dim_dyn = spec.ar_order * spec.n_latent ** 2
        self.dim_load = len(self.fmap)
        self._pool: ThreadPoolExecutor | None = None
        self._chunks = np.array_split(np.arange(ds.n_segments, dtype=np.int64),
                                      min(self.n_threads, ds.n_segments))
        self._all_segs = np.arange(ds.n_segments, dtype=np.int64)
        self.timings: dict[str, float] = {}

    # ---------------------------------------------------------------- helpers

    def _dom(self, name: str) -> int:
        return DOMAINS[name] + self.domain_offset

    def _stream(self, name: str, iteration: int, unit: int = 0) -> np.random.Generator:
        return self.streams.stream(self._dom(name), iteration, unit)

    def _normals(self, name: str, iteration: int, per_seg_shape: tuple) -> np.ndarray:
        out = np.empty((self.ds.n_segments,) + per_seg_shape)
        for s in range(self.ds.n_segments):
            out[s] = self._stream(name, iteration, s).standard_normal(per_seg_shape)
        return out

    def _parallel(self, call, phase: str = "") -> None:
        """Run ``call(seg_ids, err)`` over segment chunks; raise on kernel errors.

        Kernels flag non-SPD precisions (after their one in-kernel jitter
        retry) in ``err`` rather than raising, so partial work and chunking
        never affect determinism.
        """
        err = np.zeros(self.ds.n_segments, dtype=np.int64)
        if self._pool is None or len(self._chunks) == 1:
            call(self._all_segs, err)
        else:
            futures = [self._pool.submit(call, c, err) for c in self._chunks if c.size]
            for f in futures:
                f.result()
        if err.any():
            bad = np.flatnonzero(err)[:5].tolist()
            raise RuntimeError(
                f"non-SPD precision persisted after jitter in phase {phase!r}, segments {bad}"
            )

    def _warmup_kernels(self, st: ChainState) -> None:
        """Compile every kernel signature once before threading starts."""
        empty = np.empty(0, dtype=np.int64)
        err = np.zeros(self.ds.n_segments, dtype=np.int64)
        m = self.spec.ar_order
        zl = np.empty((self.ds.n_segments, self.ds.n_timepoints, self.spec.n_latent))
        kernels.latent_scan(empty, self.ds.y, st.latent, st.load_seg, st.dyn_seg,
                            st.noise_var, zl, m, self.tau_init, err)
        parent = np.zeros((self.ds.n_segments, self.dim_dyn))
        zd = np.empty((self.ds.n_segments, self.dim_dyn))
        kernels.segment_dynamics(empty, st.latent, self.ds.seg_group, st.prec_dyn_seg,
                                 parent, m, zd, st.dyn_seg, False, err)
        parent_l = np.zeros((self.ds.n_segments, self.dim_load))
        zt = np.empty((self.ds.n_segments, self.dim_load))
        kernels.segment_loading(empty, self.ds.y, st.latent, self.ds.seg_group,
                                st.prec_load_seg, parent_l, st.noise_var,
                                self.fmap.rows, self.fmap.cols, zt, st.load_seg, False, err)
        kernels.segment_noise_var(empty, self.ds.y, st.latent, st.load_seg,
                                  self.hyper.a0, self.hyper.b0,
                                  np.empty(self.ds.n_segments), st.noise_var, False)
        q = self.spec.n_latent
        kernels.segment_moments(empty, self.ds.y, st.latent, m,
                                np.empty((self.ds.n_segments, q, q)),
                                np.empty((self.ds.n_segments, self.ds.n_channels, q)),
                                np.empty((self.ds.n_segments, m * q, m * q)),
                                np.empty((self.ds.n_segments, q, m * q)))
        kernels.segment_loglik(empty, self.ds.y, st.latent, st.load_seg, st.dyn_seg,
                               st.noise_var, m, self.tau_init,
                               np.empty(self.ds.n_segments), np.empty(self.ds.n_segments))

    # ------------------------------------------------------------------ state

    def initial_state(self, init_loading: np.ndarray | None = None) -> ChainState:
        """Neutral chain start: random latents, zero dynamics, data-scaled
        noise variance, prior-mean precisions, loading from stage 1 (or zero)."""
        ds, spec, hyper = self.ds, self.spec, self.hyper
        st = state_template(ds, spec)
        for s in range(ds.n_segments):
            st.latent[s] = self._stream("fit_latent", 0, s).standard_normal(
                (spec.n_latent, ds.n_timepoints))
            st.noise_var[s] = max(float(np.var(ds.y[s])), 1e-8)
        if init_loading is not None:
            init_loading = np.asarray(init_loading, dtype=np.float64)
            st.load_seg[:] = init_loading
            st.load_subj[:] = init_loading
            st.load_grp[:] = init_loading
            st.load_pop[:] = init_loading
        la_eye = np.eye(self.dim_dyn)
        lt_eye = np.eye(self.dim_load)
        st.prec_dyn_seg[:] = (hyper.nu_dyn_seg / hyper.kappa_dyn_seg) * la_eye
        st.prec_dyn_subj[:] = (hyper.nu_dyn_subj / hyper.kappa_dyn_subj) * la_eye
        st.prec_dyn_grp[:] = (hyper.nu_dyn_grp / hyper.kappa_dyn_grp) * la_eye
        st.prec_load_seg[:] = (hyper.nu_load_seg / hyper.kappa_load_seg) * lt_eye
        st.prec_load_subj[:] = (hyper.nu_load_subj / hyper.kappa_load_subj) * lt_eye
        st.prec_load_grp[:] = (hyper.nu_load_grp / hyper.kappa_load_grp) * lt_eye
        return st

    # ----------------------------------------------------------------- phases

    def _phase_latent(self, st: ChainState, t: int) -> None:
        z = self._normals("fit_latent", t, (self.ds.n_timepoints, self.spec.n_latent))
        self._parallel(lambda ids, err: kernels.latent_scan(
            ids, self.ds.y, st.latent, st.load_seg, st.dyn_seg, st.noise_var, z,
            self.spec.ar_order, self.tau_init, err), "latent")

    def _subject_vec_per_segment(self, arr_subj: np.ndarray) -> np.ndarray:
        flat = arr_subj.transpose(0, 2, 1).reshape(arr_subj.shape[0], -1)
        return np.ascontiguousarray(flat[self.ds.seg_subject])

    def _phase_seg_dynamics(self, st: ChainState, t: int) -> None:
        if self.dynamics_structure == "group":
            self._collapsed_dynamics(st, t, mean_out=None)
            return
        parent = self._subject_vec_per_segment(st.dyn_subj)
        z = self._normals("fit_dynamics_seg", t, (self.dim_dyn,))
        self._parallel(lambda ids, err: kernels.segment_dynamics(
            ids, st.latent, self.ds.seg_group, st.prec_dyn_seg, parent,
            self.spec.ar_order, z, st.dyn_seg, False, err), "dynamics")

    def _phase_seg_loading(self, st: ChainState, t: int) -> None:
        if self.loading_structure == "global":
            self._global_loading(st, t, mean_out=None)
            return
        if self.loading_structure == "group":
            self._collapsed_loading(st, t, mean_out=None)
            return
        parent = np.ascontiguousarray(
            st.load_subj[:, self.fmap.rows, self.fmap.cols][self.ds.seg_subject])
        z = self._normals("fit_loading_seg", t, (self.dim_load,))
        self._parallel(lambda ids, err: kernels.segment_loading(
            ids, self.ds.y, st.latent, self.ds.seg_group, st.prec_load_seg, parent,
            st.noise_var, self.fmap.rows, self.fmap.cols, z, st.load_seg, False, err), "loading")

    def _phase_noise(self, st: ChainState, t: int) -> None:
        a_post = self.hyper.a0 + 0.5 * self.ds.n_channels * self.ds.n_timepoints
        gamma_std = np.empty(self.ds.n_segments)
        for s in range(self.ds.n_segments):
            gamma_std[s] = self._stream("fit_noise_var", t, s).gamma(a_post, 1.0)
        self._parallel(lambda ids, err: kernels.segment_noise_var(
            ids, self.ds.y, st.latent, st.load_seg, self.hyper.a0, self.hyper.b0,
            gamma_std, st.noise_var, False), "noise")

    def _segment_moments(self, st: ChainState):
        ds, q, m = self.ds, self.spec.n_latent, self.spec.ar_order
        sm = np.empty((ds.n_segments, q, q))
        g = np.empty((ds.n_segments, ds.n_channels, q))
        sstar = np.empty((ds.n_segments, m * q, m * q))
        c = np.empty((ds.n_segments, q, m * q))
        self._parallel(lambda ids, err: kernels.segment_moments(
            ids, ds.y, st.latent, m, sm, g, sstar, c), "moments")
        return sm, g, sstar, c

    def _collapsed_dynamics(self, st: ChainState, t: int, mean_out: np.ndarray | None) -> None:
        """Shared-per-group dynamics draw (or conditional mean into mean_out)."""
        _, _, sstar, cross = self._segment_moments(st)
        q, mq = self.spec.n_latent, self.spec.ar_order * self.spec.n_latent
        for r in range(self.ds.n_groups):
            segs = self.ds.group_segments[r]
            g = collapsed_dynamics_conditional(
                sstar[segs].sum(axis=0), cross[segs].sum(axis=0),
                st.prec_dyn_grp, vec(st.dyn_pop), q)
            if mean_out is not None:
                from .samplers import canonical_mean
                mean_out[segs] = unvec(canonical_mean(g), q, mq)
                continue
            draw = unvec(sample_canonical_gaussian(
                g, self._stream("fit_parents", t, _unit(_T_GRP_DYN, r))), q, mq)
            st.dyn_grp[r] = draw
            st.dyn_subj[self.ds.group_subjects[r]] = draw
            st.dyn_seg[segs] = draw

    def _collapsed_loading(self, st: ChainState, t: int, mean_out: np.ndarray | None) -> None:
        sm, gm, _, _ = self._segment_moments(st)
        w = 1.0 / st.noise_var
        p, q = self.ds.n_channels, self.spec.n_latent
        for r in range(self.ds.n_groups):
            segs = self.ds.group_segments[r]
            sm_w = np.tensordot(w[segs], sm[segs], axes=(0, 0))
            g_w = np.tensordot(w[segs], gm[segs], axes=(0, 0))
            g = collapsed_loading_conditional(sm_w, g_w, st.prec_load_grp,
                                              low(st.load_pop), self.fmap)
            if mean_out is not None:
                from .samplers import canonical_mean
                mean_out[segs] = unlow(canonical_mean(g), p, q)
                continue
            draw = unlow(sample_canonical_gaussian(
                g, self._stream("fit_parents", t, _unit(_T_GRP_LOAD, r))), p, q)
            st.load_grp[r] = draw
            st.load_subj[self.ds.group_subjects[r]] = draw
            st.load_seg[segs] = draw

    def _global_loading(self, st: ChainState, t: int, mean_out: np.ndarray | None) -> None:
        """Stage-1 move: one loading for every segment, improper flat prior."""
        sm, gm, _, _ = self._segment_moments(st)
        w = 1.0 / st.noise_var
        sm_w = np.tensordot(w, sm, axes=(0, 0))
        g_w = np.tensordot(w, gm, axes=(0, 0))
        g = collapsed_loading_conditional(sm_w, g_w, None, None, self.fmap)
        p, q = self.ds.n_channels, self.spec.n_latent
        if mean_out is not None:
            from .samplers import canonical_mean
            mean_out[:] = unlow(canonical_mean(g), p, q)
            return
        draw = unlow(sample_canonical_gaussian(
            g, self._stream("fit_parents", t, _unit(_T_GLOBAL_LOAD))), p, q)
        st.load_seg[:] = draw
        st.load_subj[:] = draw
        st.load_grp[:] = draw
        st.load_pop[:] = draw

    def _phase_subject(self, st: ChainState, t: int) -> None:
        ds = self.ds
        q, mq, p = self.spec.n_latent, self.spec.ar_order * self.spec.n_latent, ds.n_channels
        for u in range(ds.n_subjects):
            r = int(ds.subj_group[u])
            segs = ds.subj_segments[u]
            if self.dynamics_structure == "hierarchical":
                child_sum = st.dyn_seg[segs].transpose(0, 2, 1).reshape(len(segs), -1).sum(axis=0)
                g = parent_conditional(st.prec_dyn_subj[r], vec(st.dyn_grp[r]),
                                       st.prec_dyn_seg[r], child_sum, len(segs))
                st.dyn_subj[u] = unvec(sample_canonical_gaussian(
                    g, self._stream("fit_parents", t, _unit(_T_SUBJ_DYN, u))), q, mq)
            if self.loading_structure == "hierarchical":
                child_sum = st.load_seg[segs][:, self.fmap.rows, self.fmap.cols].sum(axis=0)
                g = parent_conditional(st.prec_load_subj[r], low(st.load_grp[r]),
                                       st.prec_load_seg[r], child_sum, len(segs))
                st.load_subj[u] = unlow(sample_canonical_gaussian(
                    g, self._stream("fit_parents", t, _unit(_T_SUBJ_LOAD, u))), p, q)

    def _phase_group(self, st: ChainState, t: int) -> None:
        ds = self.ds
        q, mq, p = self.spec.n_latent, self.spec.ar_order * self.spec.n_latent, ds.n_channels
        for r in range(ds.n_groups):
            subjects = ds.group_subjects[r]
            if self.dynamics_structure == "hierarchical":
                child_sum = st.dyn_subj[subjects].transpose(0, 2, 1).reshape(len(subjects), -1).sum(axis=0)
                g = parent_conditional(st.prec_dyn_grp, vec(st.dyn_pop),
                                       st.prec_dyn_subj[r], child_sum, len(subjects))
                st.dyn_grp[r] = unvec(sample_canonical_gaussian(
                    g, self._stream("fit_parents", t, _unit(_T_GRP_DYN, r))), q, mq)
            if self.loading_structure == "hierarchical":
                child_sum = st.load_subj[subjects][:, self.fmap.rows, self.fmap.cols].sum(axis=0)
                g = parent_conditional(st.prec_load_grp, low(st.load_pop),
                                       st.prec_load_subj[r], child_sum, len(subjects))
                st.load_grp[r] = unlow(sample_canonical_gaussian(
                    g, self._stream("fit_parents", t, _unit(_T_GRP_LOAD, r))), p, q)

    def _phase_population(self, st: ChainState, t: int) -> None:
        ds = self.ds
        q, mq, p = self.spec.n_latent, self.spec.ar_order * self.spec.n_latent, ds.n_channels
        child = st.dyn_grp.transpose(0, 2, 1).reshape(ds.n_groups, -1).sum(axis=0)
        g = population_conditional(child, ds.n_groups, st.prec_dyn_grp, self.tau_pop)
        st.dyn_pop = unvec(sample_canonical_gaussian(
            g, self._stream("fit_parents", t, _unit(_T_POP_DYN))), q, mq)
        if self.loading_structure != "global":
            child = st.load_grp[:, self.fmap.rows, self.fmap.cols].sum(axis=0)
            g = population_conditional(child, ds.n_groups, st.prec_load_grp, self.tau_pop)
            st.load_pop = unlow(sample_canonical_gaussian(
                g, self._stream("fit_parents", t, _unit(_T_POP_LOAD))), p, q)

    def _phase_varcomp(self, st: ChainState, t: int) -> None:
        ds, hyper = self.ds, self.hyper
        if self.dynamics_structure == "hierarchical":
            for r in range(ds.n_groups):
                segs = ds.group_segments[r]
                dev = (st.dyn_seg[segs] - st.dyn_subj[ds.seg_subject[segs]])
                dev = dev.transpose(0, 2, 1).reshape(len(segs), -1)
                dof, v = varcomp_posterior(hyper.nu_dyn_seg, hyper.kappa_dyn_seg, dev)
                st.prec_dyn_seg[r] = sample_wishart_inv_scale(
                    dof, v, self._stream("fit_varcomp", t, _unit(_T_VC_DYN_SEG, r)))
                subjects = ds.group_subjects[r]
                dev = (st.dyn_subj[subjects] - st.dyn_grp[r]).transpose(0, 2, 1).reshape(len(subjects), -1)
                dof, v = varcomp_posterior(hyper.nu_dyn_subj, hyper.kappa_dyn_subj, dev)
                st.prec_dyn_subj[r] = sample_wishart_inv_scale(
                    dof, v, self._stream("fit_varcomp", t, _unit(_T_VC_DYN_SUBJ, r)))
        dev = (st.dyn_grp - st.dyn_pop).transpose(0, 2, 1).reshape(ds.n_groups, -1)
        dof, v = varcomp_posterior(hyper.nu_dyn_grp, hyper.kappa_dyn_grp, dev)
        st.prec_dyn_grp = sample_wishart_inv_scale(
            dof, v, self._stream("fit_varcomp", t, _unit(_T_VC_DYN_GRP)))

        if self.loading_structure == "global":
            return
        rows, cols = self.fmap.rows, self.fmap.cols
        if self.loading_structure == "hierarchical":
            for r in range(ds.n_groups):
                segs = ds.group_segments[r]
                dev = st.load_seg[segs][:, rows, cols] - st.load_subj[ds.seg_subject[segs]][:, rows, cols]
                dof, v = varcomp_posterior(hyper.nu_load_seg, hyper.kappa_load_seg, dev)
                st.prec_load_seg[r] = sample_wishart_inv_scale(
                    dof, v, self._stream("fit_varcomp", t, _unit(_T_VC_LOAD_SEG, r)))
                subjects = ds.group_subjects[r]
                dev = st.load_subj[subjects][:, rows, cols] - st.load_grp[r][rows, cols]
                dof, v = varcomp_posterior(hyper.nu_load_subj, hyper.kappa_load_subj, dev)
                st.prec_load_subj[r] = sample_wishart_inv_scale(
                    dof, v, self._stream("fit_varcomp", t, _unit(_T_VC_LOAD_SUBJ, r)))
        dev = st.load_grp[:, rows, cols] - st.load_pop[rows, cols]
        dof, v = varcomp_posterior(hyper.nu_load_grp, hyper.kappa_load_grp, dev)
        st.prec_load_grp = sample_wishart_inv_scale(
            dof, v, self._stream("fit_varcomp", t, _unit(_T_VC_LOAD_GRP)))

    # ------------------------------------------------------------------ sweep

    def sweep(self, st: ChainState, t: int) -> None:
        """One full Gibbs sweep at iteration ``t`` (1-based)."""
        stamp = time.perf_counter()

        def mark(name):
            nonlocal stamp
            now = time.perf_counter()
            self.timings[name] = self.timings.get(name, 0.0) + (now - stamp)
            if self.progress is not None:
                self.progress(t, name, now - stamp)
            stamp = now

        self._phase_latent(st, t)
        mark("latent")
        for ph in self.plan.segment_order:
            if ph == "dynamics":
                self._phase_seg_dynamics(st, t)
            elif ph == "loading":
                self._phase_seg_loading(st, t)
            else:
                self._phase_noise(st, t)
            mark(ph)
        self._phase_subject(st, t)
        mark("subject")
        self._phase_group(st, t)
        mark("group")
        self._phase_population(st, t)
        mark("population")
        self._phase_varcomp(st, t)
        mark("varcomp")

    # ------------------------------------------------------------- likelihood

    def loglik_terms(self, st: ChainState) -> tuple[float, float]:
        """(sensor, state) complete-data log-likelihood terms, all segments."""
        sensor = np.zeros(self.ds.n_segments)
        state = np.zeros(self.ds.n_segments)
        self._parallel(lambda ids, err: kernels.segment_loglik(
            ids, self.ds.y, st.latent, st.load_seg, st.dyn_seg, st.noise_var,
            self.spec.ar_order, self.tau_init, sensor, state), "loglik")
        return float(sensor.sum()), float(state.sum())

    def segment_conditional_means(self, st: ChainState) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Conditional posterior means of the segment-level parameter set.

        Given the current latents, parents and variance components: Gaussian
        conditional means for dynamics and loading, inverse-gamma mean for the
        noise variance. These define the per-iteration plug-in for the
        complete-data information criterion.
        """
        ds = self.ds
        dyn_hat = np.empty_like(st.dyn_seg)
        load_hat = np.empty_like(st.load_seg)
        sig2_hat = np.empty_like(st.noise_var)
        zero_d = np.zeros((ds.n_segments, self.dim_dyn))
        zero_l = np.zeros((ds.n_segments, self.dim_load))
        if self.dynamics_structure == "hierarchical":
            parent = self._subject_vec_per_segment(st.dyn_subj)
            self._parallel(lambda ids, err: kernels.segment_dynamics(
                ids, st.latent, ds.seg_group, st.prec_dyn_seg, parent,
                self.spec.ar_order, zero_d, dyn_hat, True, err), "plugin-dynamics")
        else:
            self._collapsed_dynamics(st, 0, mean_out=dyn_hat)
        if self.loading_structure == "hierarchical":
            parent = np.ascontiguousarray(
                st.load_subj[:, self.fmap.rows, self.fmap.cols][ds.seg_subject])
            self._parallel(lambda ids, err: kernels.segment_loading(
                ids, ds.y, st.latent, ds.seg_group, st.prec_load_seg, parent,
                st.noise_var, self.fmap.rows, self.fmap.cols, zero_l, load_hat, True, err), "plugin-loading")
        elif self.loading_structure == "group":
            self._collapsed_loading(st, 0, mean_out=load_hat)
        else:
            self._global_loading(st, 0, mean_out=load_hat)
        self._parallel(lambda ids, err: kernels.segment_noise_var(
            ids, ds.y, st.latent, load_hat, self.hyper.a0, self.hyper.b0,
            np.ones(ds.n_segments), sig2_hat, True), "plugin-noise")
        return dyn_hat, load_hat, sig2_hat

    def plugin_complete_loglik(self, st: ChainState) -> float:
        dyn_hat, load_hat, sig2_hat = self.segment_conditional_means(st)
        sensor = np.zeros(self.ds.n_segments)
        state = np.zeros(self.ds.n_segments)
        self._parallel(lambda ids, err: kernels.segment_loglik(
            ids, self.ds.y, st.latent, load_hat, dyn_hat, sig2_hat,
            self.spec.ar_order, self.tau_init, sensor, state), "plugin-loglik")
        return float(sensor.sum() + state.sum())

    # -------------------------------------------------------------------- run

    def _alloc_draws(self, n_kept: int) -> dict[str, np.ndarray]:
        ds = self.ds
        q, mq, p = self.spec.n_latent, self.spec.ar_order * self.spec.n_latent, ds.n_channels
        la, lt, r, u = self.dim_dyn, self.dim_load, ds.n_groups, ds.n_subjects
        return {
            "dyn_subj": np.zeros((n_kept, u, q, mq)),
            "dyn_grp": np.zeros((n_kept, r, q, mq)),
            "dyn_pop": np.zeros((n_kept, q, mq)),
            "load_subj": np.zeros((n_kept, u, p, q)),
            "load_grp": np.zeros((n_kept, r, p, q)),
            "load_pop": np.zeros((n_kept, p, q)),
            "cov_dyn_seg": np.zeros((n_kept, r, la, la)),
            "cov_dyn_subj": np.zeros((n_kept, r, la, la)),
            "cov_dyn_grp": np.zeros((n_kept, la, la)),
            "cov_load_seg": np.zeros((n_kept, r, lt, lt)),
            "cov_load_subj": np.zeros((n_kept, r, lt, lt)),
            "cov_load_grp": np.zeros((n_kept, lt, lt)),
        }

    def _alloc_sums(self) -> dict[str, np.ndarray]:
        ds = self.ds
        q, mq, p, k = self.spec.n_latent, self.spec.ar_order * self.spec.n_latent, \
            ds.n_channels, ds.n_timepoints
        return {
            "dyn_seg": np.zeros((ds.n_segments, q, mq)),
            "load_seg": np.zeros((ds.n_segments, p, q)),
            "noise_var": np.zeros(ds.n_segments),
            "latent": np.zeros((ds.n_segments, q, k)),
            "denoised": np.zeros((ds.n_segments, p, k)),
        }

    def _retain(self, st: ChainState, idx: int, draws: dict, sums: dict,
                traces: dict) -> None:
        draws["dyn_subj"][idx] = st.dyn_subj
        draws["dyn_grp"][idx] = st.dyn_grp
        draws["dyn_pop"][idx] = st.dyn_pop
        draws["load_subj"][idx] = st.load_subj
        draws["load_grp"][idx] = st.load_grp
        draws["load_pop"][idx] = st.load_pop
        if self.dynamics_structure == "hierarchical":
            draws["cov_dyn_seg"][idx] = np.linalg.inv(st.prec_dyn_seg)
            draws["cov_dyn_subj"][idx] = np.linalg.inv(st.prec_dyn_subj)
        draws["cov_dyn_grp"][idx] = np.linalg.inv(st.prec_dyn_grp)
        if self.loading_structure == "hierarchical":
            draws["cov_load_seg"][idx] = np.linalg.inv(st.prec_load_seg)
            draws["cov_load_subj"][idx] = np.linalg.inv(st.prec_load_subj)
        if self.loading_structure != "global":
            draws["cov_load_grp"][idx] = np.linalg.inv(st.prec_load_grp)
        sums["dyn_seg"] += st.dyn_seg
        sums["load_seg"] += st.load_seg
        sums["noise_var"] += st.noise_var
        sums["latent"] += st.latent
        sums["denoised"] += np.einsum("spq,sqk->spk", st.load_seg, st.latent)
        sensor, state = self.loglik_terms(st)
        complete = sensor + state
        if not np.isfinite(complete):
            raise FloatingPointError("complete-data log-likelihood is not finite")
        traces["complete"][idx] = complete
        traces["conditional"][idx] = sensor
        traces["plugin_complete"][idx] = self.plugin_complete_loglik(st)

    def run(self, init_loading: np.ndarray | None = None,
            kept_callback=None, checkpoint_every: int = 0, checkpoint_cb=None,
            resume: dict | None = None) -> ChainOutput:
        """Execute the configured schedule and collect the chain output."""
        if self.schedule is None:
            raise ValueError("engine has no MCMC schedule")
        sched = self.schedule
        kept_iters = sched.kept_iterations()
        n_kept = kept_iters.size
        audit = SignAudit()

        if resume is not None:
            st = ChainState(**{k: resume["state"][k].copy() for k in ChainState.field_names()})
            draws = {k: v.copy() for k, v in resume["draws"].items()}
            sums = {k: v.copy() for k, v in resume["sums"].items()}
            traces = {k: v.copy() for k, v in resume["traces"].items()}
            audit.records = list(resume["audit"])
            start_t = int(resume["iteration"]) + 1
        else:
            st = self.initial_state(init_loading)
            draws = self._alloc_draws(n_kept)
            sums = self._alloc_sums()
            traces = {name: np.zeros(n_kept) for name in
                      ("complete", "conditional", "plugin_complete")}
            start_t = 1

        wall0 = time.perf_counter()
        self._warmup_kernels(st)
        with threadpool_limits(limits=1):
            pool = ThreadPoolExecutor(max_workers=self.n_threads) if self.n_threads > 1 else None
            self._pool = pool
            try:
                for t in range(start_t, sched.n_iter + 1):
                    self.sweep(st, t)
                    in_window = sched.sign_check_start <= t <= sched.sign_check_end
                    if in_window and (t - sched.sign_check_start) % sched.sign_check_every == 0:
                        apply_sign_tracking(st, self.ds, sched.rho0, t, audit)
                    if t > sched.n_burnin and (t - sched.n_burnin) % sched.thin == 0:
                        idx = (t - sched.n_burnin) // sched.thin - 1
                        self._retain(st, idx, draws, sums, traces)
                        if kept_callback is not None:
                            kept_callback(st, t)
                    if checkpoint_every and checkpoint_cb is not None and t % checkpoint_every == 0:
                        checkpoint_cb(self._snapshot(st, t, draws, sums, traces, audit), t)
            finally:
                self._pool = None
                if pool is not None:
                    pool.shutdown(wait=True)
        wall = time.perf_counter() - wall0

        n_seen = max(1, n_kept)
        seg_means = {k: v / n_seen for k, v in sums.items()}
        timings = dict(self.timings)
        timings["total"] = timings.get("total", 0.0) + wall
        return ChainOutput(
            n_latent=self.spec.n_latent, ar_order=self.spec.ar_order, mode=self.spec.mode,
            seed=self.seed, kept_iters=kept_iters, draws=draws, seg_means=seg_means,
            loglik=traces, audit=audit, timings=timings, schedule=sched,
            shape={"n_groups": self.ds.n_groups, "n_subjects": self.ds.n_subjects,
                   "n_segments": self.ds.n_segments, "n_channels": self.ds.n_channels,
                   "n_timepoints": self.ds.n_timepoints},
        )

    def _snapshot(self, st: ChainState, t: int, draws, sums, traces, audit) -> dict:
        return {
            "iteration": t,
            "state": {k: v.copy() for k, v in st.arrays().items()},
            "draws": {k: v.copy() for k, v in draws.items()},
            "sums": {k: v.copy() for k, v in sums.items()},
            "traces": {k: v.copy() for k, v in traces.items()},
            "audit": list(audit.records),
        }


def run_chain(ds: HierDataset, spec: ModelSpec, hyper: Hyperparams, schedule: MCMCSchedule,
              seed: int = 0, n_threads: int = 1, sweep_plan: SweepPlan | None = None,
              kept_callback=None, progress=None, checkpoint_every: int = 0,
              checkpoint_cb=None, resume: dict | None = None,
              init_loading: np.ndarray | None = None) -> ChainOutput:
    """Two-stage fit: shared-loading initialization, then the main chain.

    Stage 1 runs ``schedule.n_init_iter`` iterations of the shared-loading
    model and its posterior-mean loading seeds every level of the main chain.
    Pass ``init_loading`` to skip stage 1 explicitly (e.g. when resuming).
    """
    if init_loading is None and resume is None:
        init_loading = run_initialization(ds, spec, hyper, schedule.n_init_iter,
                                          seed, n_threads, progress=progress)
    engine = GibbsEngine(ds, spec, hyper, schedule=schedule, seed=seed,
                         n_threads=n_threads, sweep_plan=sweep_plan, progress=progress)
    return engine.run(init_loading=init_loading, kept_callback=kept_callback,
                      checkpoint_every=checkpoint_every, checkpoint_cb=checkpoint_cb,
                      resume=resume)
