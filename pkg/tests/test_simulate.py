import numpy as np
import pytest

from conftest import tiny_scenario
from ressm.linalg import companion_matrix, spectral_radius
from ressm.rng import Substreams
from ressm.simulate import (
    SimScenario,
    dyn_var_table,
    relative_estimation_error,
    simulate_hierarchy,
    simulate_mvar,
    smooth_loading,
)


def test_zero_dispersion_collapses_hierarchy():
    sc = tiny_scenario(n_groups=1, subjects=(3,), segments=4, q=2, p=5, m=1,
                       sd_load_seg=0.0, sd_load_subj=0.0,
                       var_dyn_seg=np.zeros((2, 2)), var_dyn_subj=np.zeros((2, 2)))
    ds, truth = simulate_hierarchy(sc, seed=0)
    for s in range(ds.n_segments):
        u = ds.seg_subject[s]
        assert np.array_equal(truth.dyn_seg[s], truth.dyn_grp[0])
        assert np.array_equal(truth.dyn_subj[u], truth.dyn_grp[0])
        assert np.array_equal(truth.load_seg[s], truth.load_grp[0])


def test_lower_triangular_pattern_all_levels():
    sc = tiny_scenario(n_groups=2, subjects=(2, 2), segments=3, q=3, p=6, m=1,
                       dyn=np.broadcast_to(np.diag([0.8, 0.7, 0.6]), (2, 3, 3)).copy())
    ds, truth = simulate_hierarchy(sc, seed=5)
    mask = np.triu(np.ones((6, 3), dtype=bool), k=1)[:, :3]
    upper = np.triu_indices(3, k=1)
    for arr in (truth.load_seg, truth.load_subj, truth.load_grp[None].reshape(-1, 6, 3)):
        for x in arr:
            assert np.all(x[np.arange(6)[:, None] < np.arange(3)[None, :]] == 0)


def test_column_space_property_noise_free():
    sc = tiny_scenario(n_groups=1, subjects=(2,), segments=2, q=2, p=6, m=1,
                       sd_load_seg=0.0, sd_load_subj=0.0,
                       var_dyn_seg=np.zeros((2, 2)), var_dyn_subj=np.zeros((2, 2)),
                       noise_var_group=[1e-18])
    ds, truth = simulate_hierarchy(sc, seed=2)
    theta = truth.load_grp[0]
    proj = theta @ np.linalg.solve(theta.T @ theta, theta.T)
    for s in range(ds.n_segments):
        resid = ds.y[s] - proj @ ds.y[s]
        assert np.abs(resid).max() < 1e-8


def test_same_seed_identical_bytes():
    sc = tiny_scenario()
    ds1, _ = simulate_hierarchy(sc, seed=9)
    ds2, _ = simulate_hierarchy(sc, seed=9)
    assert ds1.y.tobytes() == ds2.y.tobytes()
    ds3, _ = simulate_hierarchy(sc, seed=10)
    assert ds1.y.tobytes() != ds3.y.tobytes()


def test_segment_scatter_matches_config():
    # dispersion of segment-level dynamics around the subject level
    q, m = 1, 1
    var = np.array([[0.08 ** 2]])
    sc = tiny_scenario(n_groups=1, subjects=(100,), segments=20, k=6, p=3, q=q, m=m,
                       var_dyn_seg=var, var_dyn_subj=np.array([[0.1 ** 2]]))
    ds, truth = simulate_hierarchy(sc, seed=4)
    dev = truth.dyn_seg[:, 0, 0] - truth.dyn_subj[ds.seg_subject, 0, 0]
    assert dev.size == 2000
    assert np.var(dev) == pytest.approx(0.08 ** 2, rel=0.10)


def test_simulate_mvar_zero_dynamics_is_white():
    rng = np.random.default_rng(0)
    traj = simulate_mvar(np.zeros((2, 2)), 1, 50_000, rng, warmup=10)
    assert np.allclose(traj.var(axis=1), 1.0, rtol=0.05)
    lag1 = np.mean(traj[:, 1:] * traj[:, :-1], axis=1)
    assert np.all(np.abs(lag1) < 0.02)


def test_simulate_mvar_ar1_variance():
    rng = np.random.default_rng(1)
    traj = simulate_mvar(np.array([[0.9]]), 1, 100_000, rng, warmup=500)
    assert traj.var() == pytest.approx(1.0 / (1.0 - 0.81), rel=0.05)


def test_simulate_mvar_matches_lyapunov_solution():
    # control-style order-2 blocks; empirical lag covariances vs the
    # fixed point of the companion-form discrete Lyapunov equation
    q, m = 2, 2
    dyn = np.hstack([np.eye(q), -0.6 * np.eye(q)])
    comp = companion_matrix(dyn, m)
    noise = np.zeros((m * q, m * q))
    noise[:q, :q] = np.eye(q)
    gamma = np.zeros_like(noise)
    for _ in range(500):
        gamma = comp @ gamma @ comp.T + noise
    rng = np.random.default_rng(7)
    traj = simulate_mvar(dyn, m, 200_000, rng, warmup=500)
    stacked = np.concatenate([traj[:, 1:], traj[:, :-1]], axis=0)
    emp = stacked @ stacked.T / (traj.shape[1] - 1)
    assert np.abs(emp - gamma).max() / np.abs(gamma).max() < 0.05


def test_simulate_mvar_divergence_raises():
    rng = np.random.default_rng(2)
    with pytest.raises(FloatingPointError):
        simulate_mvar(np.array([[1.5]]), 1, 3000, rng, warmup=0)


def test_stationarity_reject_policy():
    # truth near the unit circle plus wide dispersion: rejected draws must be
    # redrawn until every segment companion matrix is stable
    sc = tiny_scenario(n_groups=1, subjects=(20,), segments=5, k=10, p=3, q=1, m=1,
                       dyn=np.array([[[0.97]]]), var_dyn_seg=np.array([[0.05]]),
                       var_dyn_subj=np.array([[0.05]]), stationarity="reject")
    ds, truth = simulate_hierarchy(sc, seed=3)
    for s in range(ds.n_segments):
        assert spectral_radius(companion_matrix(truth.dyn_seg[s], 1)) < 1.0


def test_stationarity_reject_exhaustion():
    sc = tiny_scenario(n_groups=1, subjects=(1,), segments=1, k=10, p=3, q=1, m=1,
                       dyn=np.array([[[1.5]]]), var_dyn_seg=np.zeros((1, 1)),
                       var_dyn_subj=np.zeros((1, 1)), stationarity="reject")
    sc.max_redraws = 5
    with pytest.raises(RuntimeError):
        simulate_hierarchy(sc, seed=0)


def test_relative_estimation_error():
    t = np.array([3.0, 4.0])
    assert relative_estimation_error(t, t) == 0.0
    assert relative_estimation_error(t, 2 * t) == pytest.approx(1.0)
    assert relative_estimation_error(t, np.array([3.0, 0.0])) == pytest.approx(0.8)
    with pytest.raises(ValueError):
        relative_estimation_error(np.zeros(2), t)


def test_smooth_loading_shape_and_pin():
    theta = smooth_loading(10, 3)
    assert theta.shape == (10, 3)
    assert theta[0, 0] == pytest.approx(0.5)
    assert np.all(theta[np.arange(10)[:, None] < np.arange(3)[None, :]] == 0)
    assert np.linalg.matrix_rank(theta) == 3


def test_dyn_var_table_layout():
    table = dyn_var_table(2, 2, [0.08 ** 2, 0.04 ** 2], 0.03 ** 2)
    assert table.shape == (2, 4)
    assert table[0, 0] == 0.08 ** 2 and table[1, 1] == 0.08 ** 2
    assert table[0, 2] == 0.04 ** 2 and table[1, 3] == 0.04 ** 2
    assert table[0, 1] == 0.03 ** 2 and table[1, 2] == 0.03 ** 2


def test_scenario_validation():
    with pytest.raises(ValueError):
        tiny_scenario(noise_var_group=[-1.0])
    with pytest.raises(ValueError):
        tiny_scenario(stationarity="maybe")
    with pytest.raises(ValueError):
        tiny_scenario(sd_load_seg=-0.1)


@pytest.mark.slow
def test_reference_scale_scenario_generates():
    # full-size two-group scenario: 2 x 75 subjects, 30 segments, 54 channels
    from ressm.bench import two_group_truth
    sc = SimScenario(
        n_groups=2, subjects_per_group=[75, 75], segments_per_subject=30,
        n_timepoints=250, n_channels=54, n_latent=2, ar_order=2,
        group_dynamics=two_group_truth(2), noise_var_group=[0.16, 0.16])
    ds, truth = simulate_hierarchy(sc, seed=0)
    assert ds.n_segments == 4500 and ds.n_channels == 54 and ds.n_timepoints == 250
    assert np.isfinite(ds.y).all()
    assert np.all(truth.noise_var == 0.16)
