"""Scikit-learn style estimator facade over the two-stage sampler."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .diagnostics import compute_cdic, compute_dic_variants, connectivity_set, summarize
from .engine import run_chain
from .model import HierDataset, MCMCSchedule, ModelSpec, default_hyperparams, validate

__all__ = ["RandomEffectsStateSpace"]


class RandomEffectsStateSpace(BaseEstimator):
    """Three-level random-effects state-space model fitted by block-Gibbs.

    Parameters mirror the model and MCMC schedule; ``get_params`` /
    ``set_params`` follow the scikit-learn contract so the estimator composes
    with grid-search style loops (e.g. over ``n_latent`` with the
    complete-data information criterion).

    Parameters
    ----------
    n_latent : latent dimension (must be < number of channels).
    ar_order : autoregressive order of the latent dynamics.
    mode : "full", "fixed_loading" or "fixed_all" random-effects structure.
    n_iter, n_burnin, thin : main-chain schedule.
    n_init_iter : stage-1 shared-loading iterations (None: use n_burnin).
    rho0 : sign-tracking cosine threshold (<= 0).
    small_kappa : prior scale multiplier for segment/subject covariances.
    seed : master seed (unsigned 64-bit).
    n_threads : worker threads for segment-level phases.

    Attributes
    ----------
    output_ : ChainOutput with kept draws, running means, traces, audit.
    loading_ : population-level loading posterior mean (P, Q).
    dynamics_ : population-level dynamics posterior mean (Q, m*Q).
    """

    def __init__(self, n_latent: int = 2, ar_order: int = 1, mode: str = "full",
                 n_iter: int = 7500, n_burnin: int = 2500, thin: int = 10,
                 n_init_iter: int | None = None, rho0: float = 0.0,
                 sign_check_every: int = 10, small_kappa: float = 1e-3,
                 seed: int = 0, n_threads: int = 1):
        self.n_latent = n_latent
        self.ar_order = ar_order
        self.mode = mode
        self.n_iter = n_iter
        self.n_burnin = n_burnin
        self.thin = thin
        self.n_init_iter = n_init_iter
        self.rho0 = rho0
        self.sign_check_every = sign_check_every
        self.small_kappa = small_kappa
        self.seed = seed
        self.n_threads = n_threads

    def _as_dataset(self, X) -> HierDataset:
        if isinstance(X, HierDataset):
            return X
        return HierDataset.from_nested(X)

    def _spec(self) -> ModelSpec:
        return ModelSpec(n_latent=self.n_latent, ar_order=self.ar_order, mode=self.mode)

    def _schedule(self) -> MCMCSchedule:
        return MCMCSchedule(n_iter=self.n_iter, n_burnin=self.n_burnin, thin=self.thin,
                            n_init_iter=self.n_init_iter, rho0=self.rho0,
                            sign_check_every=self.sign_check_every)

    def fit(self, X, y=None):
        """Run stage-1 initialization plus the main chain on ``X``.

        ``X`` is a HierDataset or nested [group][subject][segment] lists of
        (channels, timepoints) arrays; ``y`` is ignored.
        """
        ds = self._as_dataset(X)
        spec = self._spec()
        problems = validate(ds, spec)
        if problems:
            raise ValueError("; ".join(problems))
        hyper = default_hyperparams(ds.n_channels, self.n_latent, self.ar_order,
                                    small_kappa=self.small_kappa)
        self.output_ = run_chain(ds, spec, hyper, self._schedule(), seed=self.seed,
                                 n_threads=self.n_threads)
        self._ds = ds
        self.loading_ = self.output_.draws["load_pop"].mean(axis=0)
        self.dynamics_ = self.output_.draws["dyn_pop"].mean(axis=0)
        return self

    def _check_fitted(self):
        if not hasattr(self, "output_"):
            raise RuntimeError("estimator is not fitted")

    def information_criteria(self) -> dict[str, float]:
        """Complete-data criterion plus the conditional DIC variants."""
        self._check_fitted()
        out = {"cDIC": compute_cdic(self.output_)}
        out.update(compute_dic_variants(self.output_, self._ds))
        return out

    def posterior_summary(self, parameters=("dyn_grp", "load_grp")):
        self._check_fitted()
        return summarize(self.output_, parameters=parameters)

    def connectivity(self, level: str = "group") -> np.ndarray:
        """Directional connectivity matrices at the requested level."""
        self._check_fitted()
        cs = connectivity_set(self.output_)
        if level not in cs:
            raise KeyError(f"level must be one of {sorted(cs)}")
        return cs[level]
