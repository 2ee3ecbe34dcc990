import numpy as np
import pytest

from ressm.model import HierDataset, ModelSpec, default_hyperparams
from ressm.simulate import SimScenario, simulate_hierarchy


def tiny_scenario(n_groups=1, subjects=(2,), segments=2, k=40, p=4, q=1, m=1,
                  dyn=None, **kw):
    if dyn is None:
        base = np.hstack([np.diag(np.linspace(0.8, 0.6, q))] + [np.zeros((q, q))] * (m - 1))
        dyn = np.broadcast_to(base, (n_groups, q, m * q)).copy()
    return SimScenario(
        n_groups=n_groups, subjects_per_group=list(subjects), segments_per_subject=segments,
        n_timepoints=k, n_channels=p, n_latent=q, ar_order=m, group_dynamics=dyn, **kw)


@pytest.fixture
def tiny_fit_inputs():
    sc = tiny_scenario()
    ds, truth = simulate_hierarchy(sc, seed=11)
    spec = ModelSpec(n_latent=1, ar_order=1)
    hyper = default_hyperparams(4, 1, 1)
    return ds, truth, spec, hyper


def random_dataset(rng, n_groups=2, subjects=(2, 2), segments=2, p=3, k=8):
    nested = []
    u = 0
    for r in range(n_groups):
        group = []
        for _ in range(subjects[r]):
            group.append([rng.standard_normal((p, k)) for _ in range(segments)])
            u += 1
        nested.append(group)
    return HierDataset.from_nested(nested)
