"""Two-stage sign identifiability: shared-loading initialization + tracking.

Latent columns are identifiable only up to sign. Stage 1 fits a simplified
model with one loading matrix shared by every segment and uses its posterior
mean to start all loading levels from the same point. Stage 2 monitors, at a
configurable cadence inside burn-in, the cosine between each loading column
and its parent-level column, flipping the column (and, at segment level, the
matching latent trajectory) whenever the cosine drops below a non-positive
threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["cosine", "SignAudit", "apply_sign_tracking", "run_initialization"]


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine correlation x.y / (|x||y|); rejects zero vectors."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.clip(x @ y / (nx * ny), -1.0, 1.0))


@dataclass
class SignAudit:
    """Append-only log of every sign check.

    Columns: iteration, level (segment|subject|group), group r, subject i,
    segment j (-1 where not applicable), latent column q, cosine, flipped.
    """

    records: list[tuple] = field(default_factory=list)

    def add(self, iteration: int, level: str, r: int, i: int, j: int, q: int,
            value: float, flipped: bool) -> None:
        self.records.append((iteration, level, r, i, j, q, value, flipped))

    def n_flips(self) -> int:
        return sum(1 for rec in self.records if rec[7])

    def to_rows(self) -> list[tuple]:
        return list(self.records)

    HEADER = ("iteration", "level", "group", "subject", "segment", "latent", "cosine", "flipped")

    def to_table(self) -> str:
        lines = ["\t".join(self.HEADER)]
        for rec in self.records:
            lines.append("\t".join(
                [str(rec[0]), rec[1], str(rec[2]), str(rec[3]), str(rec[4]), str(rec[5]),
                 f"{rec[6]:.10g}", "1" if rec[7] else "0"]
            ))
        return "\n".join(lines) + "\n"


def apply_sign_tracking(state, ds, rho0: float, iteration: int,
                        audit: SignAudit | None = None) -> int:
    """One bottom-up pass of sign checks; returns the number of flips.

    Segment columns are compared against the subject column (flipping the
    latent row alongside), then subject vs group, then group vs population.
    A flip requires cosine strictly below ``rho0``; zero columns are skipped.
    """
    if rho0 > 0:
        raise ValueError("sign threshold must be <= 0")
    n_latent = state.load_pop.shape[1]
    flips = 0

    def check(child_col, parent_col):
        nc = np.linalg.norm(child_col)
        npar = np.linalg.norm(parent_col)
        if nc == 0.0 or npar == 0.0:
            return None
        return float(np.clip(child_col @ parent_col / (nc * npar), -1.0, 1.0))

    for s in range(ds.n_segments):
        u = int(ds.seg_subject[s])
        r, i, j = ds.segment_label(s)
        for q in range(n_latent):
            val = check(state.load_seg[s][:, q], state.load_subj[u][:, q])
            if val is None:
                continue
            flip = val < rho0
            if flip:
                state.load_seg[s][:, q] *= -1.0
                state.latent[s][q, :] *= -1.0
                flips += 1
            if audit is not None:
                audit.add(iteration, "segment", r, i, j, q, val, flip)
    for u in range(ds.n_subjects):
        r = int(ds.subj_group[u])
        i = int(np.flatnonzero(ds.group_subjects[r] == u)[0])
        for q in range(n_latent):
            val = check(state.load_subj[u][:, q], state.load_grp[r][:, q])
            if val is None:
                continue
            flip = val < rho0
            if flip:
                state.load_subj[u][:, q] *= -1.0
                flips += 1
            if audit is not None:
                audit.add(iteration, "subject", r, i, -1, q, val, flip)
    for r in range(ds.n_groups):
        for q in range(n_latent):
            val = check(state.load_grp[r][:, q], state.load_pop[:, q])
            if val is None:
                continue
            flip = val < rho0
            if flip:
                state.load_grp[r][:, q] *= -1.0
                flips += 1
            if audit is not None:
                audit.add(iteration, "group", r, -1, -1, q, val, flip)
    return flips


def run_initialization(ds, spec, hyper, n_iter: int, seed: int, n_threads: int = 1,
                       progress=None) -> np.ndarray:
    """Stage-1 shared-loading run; returns the posterior-mean loading matrix.

    Every segment shares one loading matrix with an improper flat prior; the
    dynamics hierarchy and noise variances update as usual. The mean is taken
    over the second half of the run. ``n_iter`` = 0 returns the all-zero
    matrix (the degraded tracking-only mode).
    """
    p, q = ds.n_channels, spec.n_latent
    if n_iter == 0:
        return np.zeros((p, q))
    from .engine import GibbsEngine

    engine = GibbsEngine(ds, spec, hyper, seed=seed, n_threads=n_threads,
                         loading_structure="global", domain_offset=1000)
    state = engine.initial_state()
    keep_from = n_iter // 2
    acc = np.zeros((p, q))
    n_acc = 0
    for t in range(1, n_iter + 1):
        engine.sweep(state, t)
        if t > keep_from:
            acc += state.load_pop
            n_acc += 1
        if progress is not None:
            progress(t, "stage1", None)
    return acc / max(n_acc, 1)
