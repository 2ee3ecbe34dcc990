import numpy as np
import pytest
from scipy.stats import norm as norm_dist

from conftest import tiny_scenario
from ressm.diagnostics import (
    autocorrelation,
    complete_loglik,
    compute_cdic,
    compute_dic_variants,
    connectivity,
    connectivity_edges,
    connectivity_set,
    draws_long_table,
    effective_sample_size,
    group_contrast,
    sensor_loglik,
    summarize,
    summarize_draws,
)
from ressm.engine import run_chain
from ressm.model import HierDataset, MCMCSchedule, ModelSpec, default_hyperparams
from ressm.simulate import simulate_hierarchy


def test_complete_loglik_single_datum():
    ds = HierDataset.from_nested([[[np.zeros((1, 1))]]])
    lat = np.zeros((1, 1, 1))
    loading = np.ones((1, 1, 1))
    dyn = np.zeros((1, 1, 1))
    ll = complete_loglik(ds, lat, loading, dyn, np.ones(1), 1)
    assert ll == pytest.approx(-0.5 * np.log(2 * np.pi), abs=1e-12)


def test_complete_loglik_matches_naive_density_sum():
    rng = np.random.default_rng(0)
    p, q, k_len, m = 3, 2, 7, 2
    nested = [[[rng.standard_normal((p, k_len)) for _ in range(2)]]]
    ds = HierDataset.from_nested(nested)
    lat = rng.standard_normal((2, q, k_len))
    loading = rng.standard_normal((2, p, q))
    dyn = 0.3 * rng.standard_normal((2, q, m * q))
    noise_var = np.array([0.4, 1.7])
    ll = complete_loglik(ds, lat, loading, dyn, noise_var, m)
    # naive per-observation density summation
    naive = 0.0
    for s in range(2):
        for k in range(k_len):
            mean = loading[s] @ lat[s][:, k]
            naive += norm_dist.logpdf(ds.y[s][:, k], mean, np.sqrt(noise_var[s])).sum()
            if k >= m:
                pred = sum(dyn[s][:, (h - 1) * q:h * q] @ lat[s][:, k - h]
                           for h in range(1, m + 1))
                naive += norm_dist.logpdf(lat[s][:, k], pred, 1.0).sum()
    assert ll == pytest.approx(naive, abs=1e-10)


def test_complete_loglik_noise_scaling():
    # zero residuals: doubling the noise variance costs (PK/2) log 2 per segment
    rng = np.random.default_rng(1)
    p, q, k_len = 4, 2, 11
    lat = rng.standard_normal((1, q, k_len))
    loading = rng.standard_normal((1, p, q))
    y = np.einsum("spq,sqk->spk", loading, lat)
    ds = HierDataset.from_nested([[[y[0]]]])
    dyn = np.zeros((1, q, q))
    l1 = complete_loglik(ds, lat, loading, dyn, np.array([0.5]), 1)
    l2 = complete_loglik(ds, lat, loading, dyn, np.array([1.0]), 1)
    assert l1 - l2 == pytest.approx(0.5 * p * k_len * np.log(2.0), abs=1e-9)


def fitted_output(seed=0, n_iter=40, burnin=10, thin=2):
    sc = tiny_scenario(n_groups=2, subjects=(2, 2), segments=2, k=40, p=4, q=1, m=1,
                       dyn=np.broadcast_to(np.array([[0.7]]), (2, 1, 1)).copy())
    ds, truth = simulate_hierarchy(sc, seed=seed)
    spec = ModelSpec(n_latent=1, ar_order=1)
    hyper = default_hyperparams(4, 1, 1)
    sched = MCMCSchedule(n_iter=n_iter, n_burnin=burnin, thin=thin, n_init_iter=10)
    return ds, run_chain(ds, spec, hyper, sched, seed=seed + 1)


def test_engine_loglik_trace_matches_reference():
    ds, out = fitted_output()
    assert np.isfinite(out.loglik["complete"]).all()
    # the conditional trace is the sensor part: consistent with the running
    # means only in expectation, but the identity complete = sensor + state
    # is checked inside the engine; here verify cDIC composes the traces
    cdic = compute_cdic(out)
    expected = -4.0 * out.loglik["complete"].mean() + 2.0 * out.loglik["plugin_complete"].mean()
    assert cdic == pytest.approx(expected, rel=1e-12)


def test_cdic_degenerate_chain_collapses_to_deviance():
    ds, out = fitted_output()
    const = -123.45
    out.loglik["complete"][:] = const
    out.loglik["plugin_complete"][:] = const
    assert compute_cdic(out) == pytest.approx(-2.0 * const)


def test_dic_variants_single_draw_degenerate():
    ds, out = fitted_output(n_iter=12, burnin=10, thin=2)
    assert out.n_kept == 1
    crit = compute_dic_variants(out, ds)
    assert crit["p_d"] == pytest.approx(0.0, abs=1e-6)
    assert crit["p_v"] == 0.0
    assert crit["DIC1"] == pytest.approx(crit["deviance_at_mean"], abs=1e-5)
    assert crit["DIC2"] == pytest.approx(crit["deviance_at_mean"], abs=1e-5)
    assert crit["DIC3"] == pytest.approx(crit["deviance_at_mean"], abs=1e-5)


def test_dic_variants_two_draw_hand_formula():
    ds, out = fitted_output(n_iter=14, burnin=10, thin=2)
    assert out.n_kept == 2
    l1, l2 = out.loglik["conditional"]
    lhat = sensor_loglik(ds.y, out.seg_means["denoised"], out.seg_means["noise_var"])
    crit = compute_dic_variants(out, ds)
    p_d_hand = -(l1 + l2) + 2.0 * lhat
    assert crit["p_d"] == pytest.approx(p_d_hand, rel=1e-10)
    assert crit["DIC1"] == pytest.approx(-2 * lhat + 2 * p_d_hand, rel=1e-10)
    assert crit["DIC2"] == pytest.approx(-2 * lhat + 3 * p_d_hand, rel=1e-10)
    p_v_hand = 2.0 * np.var([l1, l2], ddof=1)
    assert crit["DIC3"] == pytest.approx(-2 * lhat + 2 * p_v_hand, rel=1e-10)


def test_ess_white_chain():
    rng = np.random.default_rng(2)
    x = rng.standard_normal(10_000)
    assert 0.9 <= effective_sample_size(x) / x.size <= 1.1


def test_ess_ar1_chain():
    rng = np.random.default_rng(3)
    n, rho = 200_000, 0.5
    x = np.empty(n)
    x[0] = rng.standard_normal()
    eps = rng.standard_normal(n)
    for i in range(1, n):
        x[i] = rho * x[i - 1] + np.sqrt(1 - rho ** 2) * eps[i]
    # AR(1) oracle: ESS/n = (1 - rho)/(1 + rho) = 1/3
    assert effective_sample_size(x) / n == pytest.approx(1.0 / 3.0, rel=0.15)


def test_ess_constant_chain():
    x = np.full(50, 3.14)
    assert effective_sample_size(x) == 50.0


def test_summarize_draws_constant_and_quantiles():
    draws = np.full((20, 2), 1.5)
    df = summarize_draws(draws)
    assert np.allclose(df["sd"], 0.0)
    assert np.allclose(df["ci_norm_lo"], 1.5) and np.allclose(df["ci_norm_hi"], 1.5)
    rng = np.random.default_rng(4)
    draws = rng.standard_normal((20_000, 1)) * 2.0 + 1.0
    df = summarize_draws(draws)
    row = df.iloc[0]
    assert row["ci_q_lo"] < row["mean"] < row["ci_q_hi"]
    width_norm = row["ci_norm_hi"] - row["ci_norm_lo"]
    width_q = row["ci_q_hi"] - row["ci_q_lo"]
    assert abs(width_q - width_norm) / width_norm < 0.10


def test_summarize_output_long_format():
    _, out = fitted_output()
    df = summarize(out, parameters=("dyn_grp", "load_pop"))
    assert set(df["parameter"]) == {"dyn_grp", "load_pop"}
    assert {"mean", "sd", "ci_norm_lo", "ci_q_hi", "ess", "acf_1"} <= set(df.columns)
    long = draws_long_table(out, parameters=("dyn_grp",))
    assert len(long) == out.n_kept * out.draws["dyn_grp"][0].size


def test_group_contrast_identical_groups():
    _, out = fitted_output()
    out.draws["dyn_grp"][:, 1] = out.draws["dyn_grp"][:, 0]
    df = group_contrast(out, [1.0, -1.0])
    assert np.allclose(df["mean"], 0.0)
    assert not df["excludes_zero"].any()


def test_group_contrast_single_group_recovery():
    _, out = fitted_output()
    df = group_contrast(out, [1.0, 0.0])
    direct = summarize_draws(out.draws["dyn_grp"][:, 0])
    assert np.allclose(df["mean"].values, direct["mean"].values)
    with pytest.raises(ValueError):
        group_contrast(out, [1.0])


def test_group_contrast_bonferroni_widens():
    _, out = fitted_output()
    plain = group_contrast(out, [1.0, -1.0])
    adj = group_contrast(out, [1.0, -1.0], bonferroni=True)
    w0 = plain["ci_norm_hi"] - plain["ci_norm_lo"]
    w1 = adj["ci_norm_hi"] - adj["ci_norm_lo"]
    assert (w1.values >= w0.values - 1e-12).all()


def test_connectivity_orthonormal_loading_block():
    q, p = 2, 5
    loading = np.zeros((p, q))
    loading[:q, :q] = np.eye(q)
    a = np.array([[0.5, 0.1], [0.0, 0.4]])
    b = connectivity(loading, a, 1)[0]
    assert np.allclose(b[:q, :q], a)
    assert np.allclose(b[q:, :], 0.0) and np.allclose(b[:, q:], 0.0)


def test_connectivity_pseudo_inverse_oracle_and_invariances():
    rng = np.random.default_rng(5)
    p, q, m = 6, 3, 2
    loading = rng.standard_normal((p, q))
    dyn = rng.standard_normal((q, m * q))
    b = connectivity(loading, dyn, m)
    # naive explicit-inverse oracle
    pinv_proj = np.linalg.inv(loading.T @ loading) @ loading.T
    for h in range(m):
        oracle = loading @ dyn[:, h * q:(h + 1) * q] @ pinv_proj
        assert np.abs(b[h] - oracle).max() < 1e-10
    # orthogonal rotation of the latent basis leaves B unchanged
    qr = np.linalg.qr(rng.standard_normal((q, q)))[0]
    dyn_rot = np.hstack([qr @ dyn[:, h * q:(h + 1) * q] @ qr.T for h in range(m)])
    b_rot = connectivity(loading @ qr.T, dyn_rot, m)
    assert np.abs(b - b_rot).max() < 1e-10
    # column sign flips likewise
    s = np.diag([1.0, -1.0, -1.0])
    dyn_flip = np.hstack([s @ dyn[:, h * q:(h + 1) * q] @ s for h in range(m)])
    b_flip = connectivity(loading @ s, dyn_flip, m)
    assert np.abs(b - b_flip).max() < 1e-10


def test_connectivity_rank_deficient_raises():
    loading = np.ones((4, 2))
    with pytest.raises(np.linalg.LinAlgError):
        connectivity(loading, np.eye(2), 1)


def test_connectivity_set_and_edges():
    _, out = fitted_output()
    cs = connectivity_set(out)
    s = out.seg_means["load_seg"].shape[0]
    assert cs["segment"].shape[:2] == (s, 1)
    assert cs["group"].shape == (2, 1, 4, 4)
    assert cs["group_draws"].shape[0] == out.n_kept
    edges = connectivity_edges(cs["group"][0, 0], threshold=0.05)
    assert set(edges.columns) == {"source", "target", "weight"}
    if len(edges):
        assert (np.abs(edges["weight"]) >= 0.05).all()
    all_edges = connectivity_edges(cs["group"][0, 0], threshold=0.0)
    assert len(all_edges) == 16
