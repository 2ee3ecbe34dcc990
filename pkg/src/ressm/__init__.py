"""Hierarchical random-effects state-space modeling of multichannel time series.

A block-Gibbs sampler over a three-level (group / subject / segment) model:
each segment's channels load a low-dimensional latent autoregression, and
both the loading and the dynamics matrices carry nested random effects.
Includes a two-stage sign-identifiability procedure, complete-data
information criteria for choosing the latent dimension, directional
connectivity outputs, simulation and benchmark harnesses, and a CLI.
"""

__version__ = "0.1.0"

from .diagnostics import (
    complete_loglik,
    compute_cdic,
    compute_dic_variants,
    connectivity,
    effective_sample_size,
    group_contrast,
    summarize,
)
from .engine import ChainOutput, GibbsEngine, SweepPlan, run_chain
from .estimator import RandomEffectsStateSpace
from .identify import SignAudit, apply_sign_tracking, cosine, run_initialization
from .linalg import companion_matrix, low, low_len, spectral_radius, unlow, unvec, vec
from .model import (
    ChainState,
    HierDataset,
    Hyperparams,
    MCMCSchedule,
    ModelSpec,
    default_hyperparams,
    validate,
)
from .rng import Substreams
from .samplers import (
    CanonicalGaussian,
    sample_canonical_gaussian,
    sample_inverse_gamma,
    sample_wishart,
    sample_wishart_inv_scale,
)
from .simulate import SimScenario, relative_estimation_error, simulate_hierarchy, simulate_mvar

__all__ = [
    "__version__",
    "CanonicalGaussian",
    "ChainOutput",
    "ChainState",
    "GibbsEngine",
    "HierDataset",
    "Hyperparams",
    "MCMCSchedule",
    "ModelSpec",
    "RandomEffectsStateSpace",
    "SignAudit",
    "SimScenario",
    "Substreams",
    "SweepPlan",
    "apply_sign_tracking",
    "companion_matrix",
    "complete_loglik",
    "compute_cdic",
    "compute_dic_variants",
    "connectivity",
    "cosine",
    "default_hyperparams",
    "effective_sample_size",
    "group_contrast",
    "low",
    "low_len",
    "relative_estimation_error",
    "run_chain",
    "run_initialization",
    "sample_canonical_gaussian",
    "sample_inverse_gamma",
    "sample_wishart",
    "sample_wishart_inv_scale",
    "simulate_hierarchy",
    "simulate_mvar",
    "spectral_radius",
    "summarize",
    "unlow",
    "unvec",
    "validate",
    "vec",
]
