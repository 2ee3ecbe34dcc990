"""Data container, model configuration, hyperparameters and chain state."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .linalg import LowerIndexMap, low_len

__all__ = [
    "HierDataset",
    "ModelSpec",
    "Hyperparams",
    "MCMCSchedule",
    "ChainState",
    "validate",
    "validate_nested",
    "default_hyperparams",
    "MODES",
]

MODES = ("full", "fixed_loading", "fixed_all")


class HierDataset:
    """Group / subject / segment nested multichannel recordings.

    Stores every segment as a (P, K) slice of one (S, P, K) array plus index
    arrays mapping segments to subjects and groups. K and P are constant
    across segments; subjects may have different segment counts.
    """

    def __init__(self, y: np.ndarray, seg_subject: np.ndarray, seg_group: np.ndarray,
                 subj_group: np.ndarray):
        self.y = np.ascontiguousarray(y, dtype=np.float64)
        self.seg_subject = np.asarray(seg_subject, dtype=np.int64)
        self.seg_group = np.asarray(seg_group, dtype=np.int64)
        self.subj_group = np.asarray(subj_group, dtype=np.int64)
        if self.y.ndim != 3:
            raise ValueError("y must have shape (segments, channels, timepoints)")
        if self.seg_subject.shape != (self.y.shape[0],) or self.seg_group.shape != (self.y.shape[0],):
            raise ValueError("segment index arrays do not match the number of segments")
        self.n_segments, self.n_channels, self.n_timepoints = self.y.shape
        self.n_subjects = self.subj_group.size
        self.n_groups = int(self.subj_group.max()) + 1 if self.n_subjects else 0
        self.subj_segments = [np.flatnonzero(self.seg_subject == u) for u in range(self.n_subjects)]
        self.group_subjects = [np.flatnonzero(self.subj_group == r) for r in range(self.n_groups)]
        self.group_segments = [np.flatnonzero(self.seg_group == r) for r in range(self.n_groups)]

    @classmethod
    def from_nested(cls, nested: list) -> "HierDataset":
        """Build from nested lists: nested[r][i][j] is a (P, K) array."""
        problems = validate_nested(nested)
        if problems:
            raise ValueError("invalid nested data: " + "; ".join(problems))
        segs, seg_subject, seg_group, subj_group = [], [], [], []
        u = 0
        for r, group in enumerate(nested):
            for subj in group:
                for seg in subj:
                    segs.append(np.asarray(seg, dtype=np.float64))
                    seg_subject.append(u)
                    seg_group.append(r)
                subj_group.append(r)
                u += 1
        return cls(np.stack(segs), np.array(seg_subject), np.array(seg_group), np.array(subj_group))

    def segment_label(self, s: int) -> tuple[int, int, int]:
        """(group r, within-group subject index i, within-subject segment j), 0-based."""
        u = int(self.seg_subject[s])
        r = int(self.seg_group[s])
        i = int(np.flatnonzero(self.group_subjects[r] == u)[0])
        j = int(np.flatnonzero(self.subj_segments[u] == s)[0])
        return r, i, j

    @property
    def subjects_per_group(self) -> list[int]:
        return [len(g) for g in self.group_subjects]

    @property
    def segments_per_subject(self) -> list[int]:
        return [len(s) for s in self.subj_segments]

    def __repr__(self) -> str:
        return (f"HierDataset(groups={self.n_groups}, subjects={self.n_subjects}, "
                f"segments={self.n_segments}, channels={self.n_channels}, "
                f"timepoints={self.n_timepoints})")


@dataclass(frozen=True)
class ModelSpec:
    """Latent dimension, autoregressive order and random-effects mode.

    ``mode`` selects which levels carry their own matrices: "full" gives every
    segment and subject its own loading and dynamics, "fixed_loading" shares
    one loading per group, "fixed_all" additionally shares one dynamics matrix
    per group.
    """

    n_latent: int
    ar_order: int = 1
    mode: str = "full"

    def __post_init__(self):
        if self.n_latent < 1:
            raise ValueError("n_latent must be >= 1")
        if self.ar_order < 1:
            raise ValueError("ar_order must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class Hyperparams:
    """Wishart dofs, scale multipliers (scale = kappa * I) and IG(a0, b0).

    Suffixes name the variance component: loading vs dynamics deviations at
    segment, subject and group level.
    """

    nu_load_seg: float
    nu_load_subj: float
    nu_load_grp: float
    nu_dyn_seg: float
    nu_dyn_subj: float
    nu_dyn_grp: float
    kappa_load_seg: float
    kappa_load_subj: float
    kappa_load_grp: float
    kappa_dyn_seg: float
    kappa_dyn_subj: float
    kappa_dyn_grp: float
    a0: float = 0.01
    b0: float = 0.01

    def check(self, n_channels: int, n_latent: int, ar_order: int) -> None:
        la = ar_order * n_latent ** 2
        lt = low_len(n_channels, n_latent)
        for name in ("nu_load_seg", "nu_load_subj", "nu_load_grp", "nu_dyn_seg",
                     "nu_dyn_subj", "nu_dyn_grp", "kappa_load_seg", "kappa_load_subj",
                     "kappa_load_grp", "kappa_dyn_seg", "kappa_dyn_subj",
                     "kappa_dyn_grp", "a0", "b0"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.nu_dyn_seg < la or self.nu_dyn_subj < la:
            raise ValueError(f"dynamics dofs must be >= {la}")
        if self.nu_load_seg < lt or self.nu_load_subj < lt:
            raise ValueError(f"loading dofs must be >= {lt}")
        if self.nu_dyn_grp < la + 3:
            raise ValueError(f"group dynamics dof must be >= {la + 3}")
        if self.nu_load_grp < lt + 3:
            raise ValueError(f"group loading dof must be >= {lt + 3}")


def default_hyperparams(n_channels: int, n_latent: int, ar_order: int,
                        small_kappa: float = 1e-3) -> Hyperparams:
    """Default prior settings given the model dimensions.

    Segment/subject dofs sit at the component dimension so the posterior mean
    reduces to the REML-style scatter/(n-1) plus a kappa/(n-1) ridge; group
    dofs add 3 so the posterior covariance exists even with two groups. Group
    scale multipliers are large (100) to keep groups apart, the rest small.
    """
    la = ar_order * n_latent ** 2
    lt = low_len(n_channels, n_latent)
    return Hyperparams(
        nu_load_seg=lt, nu_load_subj=lt, nu_load_grp=lt + 3,
        nu_dyn_seg=la, nu_dyn_subj=la, nu_dyn_grp=la + 3,
        kappa_load_seg=small_kappa, kappa_load_subj=small_kappa, kappa_load_grp=100.0,
        kappa_dyn_seg=small_kappa, kappa_dyn_subj=small_kappa, kappa_dyn_grp=100.0,
    )


@dataclass
class MCMCSchedule:
    """Iteration counts, thinning and the sign-tracking window.

    The sign window defaults to the second half of burn-in with a check every
    10 iterations; ``rho0`` is the (non-positive) cosine threshold below which
    a column sign is flipped. ``n_init_iter`` is the stage-1 shared-loading
    run length and defaults to the burn-in length.
    """

    n_iter: int = 7500
    n_burnin: int = 2500
    thin: int = 10
    n_init_iter: int | None = None
    sign_check_start: int | None = None
    sign_check_end: int | None = None
    sign_check_every: int = 10
    rho0: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.n_init_iter is None:
            self.n_init_iter = self.n_burnin
        if self.sign_check_start is None:
            self.sign_check_start = self.n_burnin // 2
        if self.sign_check_end is None:
            self.sign_check_end = self.n_burnin
        if not 0 <= self.n_burnin < self.n_iter:
            raise ValueError("need 0 <= n_burnin < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.rho0 > 0:
            raise ValueError("rho0 must be <= 0")
        if not (0 <= self.sign_check_start <= self.sign_check_end <= self.n_burnin):
            raise ValueError("sign-tracking window must sit inside burn-in")
        if self.sign_check_every < 1:
            raise ValueError("sign_check_every must be >= 1")

    def scaled(self, factor: float) -> "MCMCSchedule":
        """Shrink every iteration count by ``factor`` (for desk-scale runs)."""
        if factor <= 0:
            raise ValueError("scale factor must be positive")
        def sc(n):
            return max(1, int(round(n / factor)))
        burn = sc(self.n_burnin) if self.n_burnin else 0
        return MCMCSchedule(
            n_iter=max(sc(self.n_iter), burn + 1),
            n_burnin=burn,
            thin=self.thin,
            n_init_iter=sc(self.n_init_iter),
            sign_check_start=burn // 2,
            sign_check_end=burn,
            sign_check_every=self.sign_check_every,
            rho0=self.rho0,
            checkpoint_every=self.checkpoint_every,
        )

    def kept_iterations(self) -> np.ndarray:
        """1-based iteration numbers retained after burn-in and thinning."""
        upper = np.arange(self.n_burnin + self.thin, self.n_iter + 1, self.thin)
        return upper


@dataclass
class ChainState:
    """Every sampled quantity of one Gibbs chain.

    Loadings keep their strictly-upper entries at exactly zero at all levels;
    variance components are stored as precision matrices (that is what the
    conjugate Wishart updates draw); the latent innovation covariance is
    pinned to the identity and not stored.
    """

    latent: np.ndarray        # (S, Q, K)
    dyn_seg: np.ndarray       # (S, Q, m*Q)
    dyn_subj: np.ndarray      # (U, Q, m*Q)
    dyn_grp: np.ndarray       # (R, Q, m*Q)
    dyn_pop: np.ndarray       # (Q, m*Q)
    load_seg: np.ndarray      # (S, P, Q)
    load_subj: np.ndarray     # (U, P, Q)
    load_grp: np.ndarray      # (R, P, Q)
    load_pop: np.ndarray      # (P, Q)
    noise_var: np.ndarray     # (S,)
    prec_load_seg: np.ndarray   # (R, Lt, Lt)
    prec_load_subj: np.ndarray  # (R, Lt, Lt)
    prec_load_grp: np.ndarray   # (Lt, Lt)
    prec_dyn_seg: np.ndarray    # (R, La, La)
    prec_dyn_subj: np.ndarray   # (R, La, La)
    prec_dyn_grp: np.ndarray    # (La, La)

    def copy(self) -> "ChainState":
        return ChainState(**{k: getattr(self, k).copy() for k in self.__dataclass_fields__})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def field_names() -> tuple[str, ...]:
        return tuple(ChainState.__dataclass_fields__)


def validate_nested(nested: list) -> list[str]:
    """Shape screening of nested [group][subject][segment] arrays."""
    problems: list[str] = []
    shape = None
    if not nested:
        return ["no groups present"]
    for r, group in enumerate(nested):
        if not group:
            problems.append(f"group {r} has no subjects")
        for i, subj in enumerate(group):
            if not subj:
                problems.append(f"subject (r={r}, i={i}) has no segments")
            for j, seg in enumerate(subj):
                arr = np.asarray(seg)
                if arr.ndim != 2:
                    problems.append(f"segment (r={r}, i={i}, j={j}) is not a matrix")
                    continue
                if shape is None:
                    shape = arr.shape
                elif arr.shape != shape:
                    problems.append(
                        f"segment (r={r}, i={i}, j={j}) has shape {arr.shape}, expected {shape}"
                    )
    return problems


def validate(ds: HierDataset, spec: ModelSpec) -> list[str]:
    """Return all violations preventing a fit; empty means good to go."""
    problems: list[str] = []
    if spec.n_latent >= ds.n_channels:
        problems.append(
            f"latent dimension must be < channels (got Q={spec.n_latent}, P={ds.n_channels})"
        )
    if ds.n_timepoints <= spec.ar_order:
        problems.append(
            f"need more timepoints than the AR order (K={ds.n_timepoints}, m={spec.ar_order})"
        )
    if ds.n_groups < 1 or ds.n_subjects < 1 or ds.n_segments < 1:
        problems.append("dataset must contain at least one group, subject and segment")
    for u, segs in enumerate(ds.subj_segments):
        if segs.size == 0:
            problems.append(f"subject {u} has no segments")
    bad = ~np.isfinite(ds.y)
    if bad.any():
        s, p, k = [int(v) for v in np.argwhere(bad)[0]]
        r, i, j = ds.segment_label(s)
        problems.append(
            f"non-finite sample at (r={r}, i={i}, j={j}, k={k}, p={p})"
            f" [{int(bad.sum())} total]"
        )
    return problems


def state_template(ds: HierDataset, spec: ModelSpec) -> ChainState:
    """Zero-initialized state with the right shapes for (dataset, spec)."""
    p, q, m = ds.n_channels, spec.n_latent, spec.ar_order
    la = m * q * q
    lt = low_len(p, q)
    r, u, s, k = ds.n_groups, ds.n_subjects, ds.n_segments, ds.n_timepoints
    eye_la = np.broadcast_to(np.eye(la), (r, la, la)).copy()
    eye_lt = np.broadcast_to(np.eye(lt), (r, lt, lt)).copy()
    return ChainState(
        latent=np.zeros((s, q, k)),
        dyn_seg=np.zeros((s, q, m * q)),
        dyn_subj=np.zeros((u, q, m * q)),
        dyn_grp=np.zeros((r, q, m * q)),
        dyn_pop=np.zeros((q, m * q)),
        load_seg=np.zeros((s, p, q)),
        load_subj=np.zeros((u, p, q)),
        load_grp=np.zeros((r, p, q)),
        load_pop=np.zeros((p, q)),
        noise_var=np.ones(s),
        prec_load_seg=eye_lt.copy(),
        prec_load_subj=eye_lt.copy(),
        prec_load_grp=np.eye(lt),
        prec_dyn_seg=eye_la.copy(),
        prec_dyn_subj=eye_la.copy(),
        prec_dyn_grp=np.eye(la),
    )
