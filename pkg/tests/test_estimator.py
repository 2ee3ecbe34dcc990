import numpy as np
import pytest
from sklearn.base import clone

from conftest import tiny_scenario
from ressm.estimator import RandomEffectsStateSpace
from ressm.simulate import simulate_hierarchy


@pytest.fixture(scope="module")
def fitted():
    sc = tiny_scenario()
    ds, _ = simulate_hierarchy(sc, seed=2)
    est = RandomEffectsStateSpace(n_latent=1, ar_order=1, n_iter=20, n_burnin=8,
                                  thin=2, n_init_iter=5, seed=1)
    return est.fit(ds), ds


def test_get_set_params_roundtrip():
    est = RandomEffectsStateSpace(n_latent=3, ar_order=2, seed=7)
    params = est.get_params()
    assert params["n_latent"] == 3 and params["ar_order"] == 2
    est2 = clone(est).set_params(n_latent=2)
    assert est2.get_params()["n_latent"] == 2
    assert est.get_params()["n_latent"] == 3


def test_fit_exposes_artifacts(fitted):
    est, ds = fitted
    assert est.output_.n_kept == 6
    assert est.loading_.shape == (4, 1)
    assert est.dynamics_.shape == (1, 1)
    crit = est.information_criteria()
    assert {"cDIC", "DIC1", "DIC2", "DIC3"} <= set(crit)
    table = est.posterior_summary()
    assert len(table) > 0
    conn = est.connectivity("group")
    assert conn.shape == (1, 1, 4, 4)
    with pytest.raises(KeyError):
        est.connectivity("nowhere")


def test_fit_validates_inputs():
    sc = tiny_scenario()
    ds, _ = simulate_hierarchy(sc, seed=2)
    est = RandomEffectsStateSpace(n_latent=4, ar_order=1, n_iter=10, n_burnin=2)
    with pytest.raises(ValueError):
        est.fit(ds)
    with pytest.raises(RuntimeError):
        RandomEffectsStateSpace().information_criteria()


def test_fit_accepts_nested_lists():
    rng = np.random.default_rng(0)
    nested = [[[rng.standard_normal((4, 30)) for _ in range(2)] for _ in range(2)]]
    est = RandomEffectsStateSpace(n_latent=1, ar_order=1, n_iter=12, n_burnin=4,
                                  thin=2, n_init_iter=3, seed=0)
    est.fit(nested)
    assert est.output_.shape["n_segments"] == 4
