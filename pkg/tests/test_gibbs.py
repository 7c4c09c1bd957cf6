import math

import numpy as np
import pytest
from scipy import stats

from stmix import rng as rk
from stmix.gibbs import (
    GibbsSampler,
    build_grid,
    draw_alpha_rw,
    draw_eta0,
    draw_mu,
    draw_rho_index,
    draw_tau,
    log_posterior,
    rho_log_weights,
    run_chain,
)
from stmix.model import ModelConfig, ParamState
from stmix.spatial import SpatialGraph, precompute_rho_grid

from conftest import make_panel

BOUNDS = np.array([0.0, 1.0, 3.0, np.inf])


def ring_graph(m):
    return SpatialGraph.from_edges(m, [(i, (i + 1) % m) for i in range(m)], m)


def sampler_for(counts, K=2, variant="sar_rw", **cfg):
    panel = make_panel(counts, BOUNDS)
    config = ModelConfig(K=K, variant=variant, **cfg)
    grid = build_grid(ring_graph(panel.m) if panel.m > 2 else None, config, panel.m)
    return GibbsSampler(panel, config, grid)


# -- component counts --------------------------------------------------------

def test_counts_k1_forced_and_conserved():
    r = rk.make_rng(0)
    counts = r.integers(0, 30, (4, 2, 3))
    smp = sampler_for(counts, K=1)
    st = smp.initial_state()
    s = smp.update_component_counts(r, st)
    assert np.array_equal(s[..., 0], counts)
    smp = sampler_for(counts, K=3)
    st = smp.initial_state()
    for _ in range(5):
        s = smp.update_component_counts(r, st)
        assert np.array_equal(s.sum(axis=-1), counts)


def test_counts_identical_components_uniform():
    r = rk.make_rng(1)
    counts = np.full((4, 2, 3), 500)
    smp = sampler_for(counts, K=3)
    st = smp.initial_state()
    st.beta[:] = 0.3
    st.sigma2[:] = 0.8
    s = smp.update_component_counts(r, st)
    frac = s.sum(axis=(0, 1, 2)) / s.sum()
    assert np.allclose(frac, 1 / 3, atol=0.01)


def test_counts_zero_cells_consume_no_rng():
    smp = sampler_for(np.zeros((4, 2, 3), dtype=int), K=2)
    st = smp.initial_state()
    r = rk.make_rng(2)
    before = r.bit_generator.state
    s = smp.update_component_counts(r, st)
    assert np.all(s == 0)
    assert r.bit_generator.state == before


# -- Polya-gamma augmentation ------------------------------------------------

def test_omega_moments_and_empty_cells():
    r = rk.make_rng(3)
    counts = np.zeros((4, 2, 3), dtype=int)
    counts[0, 0] = [5, 3, 2]
    counts[1, 1] = [1, 0, 0]
    smp = sampler_for(counts, K=2)
    st = smp.initial_state()
    lin = smp._linear_predictor(st)
    draws = np.array([smp.update_omega(r, st, 1, lin)[0] for _ in range(20000)])
    assert np.all(draws[:, ~smp.has_data] == 0)
    _, C = smp.update_omega(r, st, 1, lin)
    assert np.all(C == 0)                 # all effects zero, K = 2
    want = rk.pg_mean(10, 0.0)
    assert abs(draws[:, 0, 0].mean() - want) < 4 * math.sqrt(rk.pg_var(10, 0.0) / 20000)
    st.u[1] = 1.3
    lin = smp._linear_predictor(st)
    d2 = np.array([smp.update_omega(r, st, 1, lin)[0][0, 0] for _ in range(20000)])
    psi = 1.3
    want = 10 / (2 * psi) * math.tanh(psi / 2)
    assert abs(d2.mean() - want) < 4 * math.sqrt(rk.pg_var(10, psi) / 20000)


# -- spatial effects ---------------------------------------------------------

def test_update_u_no_data_is_prior():
    r = rk.make_rng(4)
    smp = sampler_for(np.zeros((4, 2, 3), dtype=int), K=2)
    st = smp.initial_state()
    st.mu[1], st.tau[1] = 0.7, 2.0
    q = smp.prior_precision(st, 1)
    zero = np.zeros((4, 2))
    n = 40000
    u = np.empty((n, 4))
    for j in range(n):
        smp.update_u(r, st, 1, zero, zero, zero)
        u[j] = st.u[1]
    cov = np.linalg.inv(2.0 * q)
    assert np.allclose(u.mean(axis=0), 0.7, atol=4 * math.sqrt(cov.max() / n))
    assert np.linalg.norm(np.cov(u.T) - cov) / np.linalg.norm(cov) < 0.05


def test_update_u_scalar_conjugacy(monkeypatch):
    smp = sampler_for(np.ones((1, 1, 3), dtype=int), K=2, variant="two_way")
    st = smp.initial_state()
    st.mu[1], st.tau[1], st.eta[1, 0] = 0.4, 3.0, -0.2
    omega, C, d = np.array([[1.7]]), np.array([[0.5]]), np.array([[0.8]])
    seen = {}

    def spy(rng, h, P):
        seen["h"], seen["P"] = h.copy(), P.copy()
        return np.zeros_like(h)

    monkeypatch.setattr(rk, "sample_mvn_precision", spy)
    smp.update_u(rk.make_rng(0), st, 1, omega, C, d)
    prec = 1.7 + 3.0
    mean = (0.8 - 1.7 * (-0.2 - 0.5) + 0.4 * 3.0) / prec
    assert seen["P"][0, 0] == pytest.approx(prec)
    assert seen["h"][0] / seen["P"][0, 0] == pytest.approx(mean)


# -- temporal effects --------------------------------------------------------

def test_update_eta_no_data_random_walk():
    r = rk.make_rng(5)
    smp = sampler_for(np.zeros((4, 1, 3), dtype=int), K=2)
    st = smp.initial_state()
    st.eta0[1], st.alpha[1] = 0.6, 0.3
    zero = np.zeros((4, 1))
    x = np.empty(40000)
    for j in range(x.size):
        smp.update_eta(r, st, 1, zero, zero, zero)
        x[j] = st.eta[1, 0]
    assert stats.kstest(x, stats.norm(0.6, math.sqrt(0.3)).cdf).pvalue > 0.001

    smp = sampler_for(np.zeros((4, 3, 3), dtype=int), K=2)
    st = smp.initial_state()
    st.alpha[1] = 0.5
    zero = np.zeros((4, 3))
    resid = np.empty(40000)
    for j in range(resid.size):
        right = st.eta[1, 2]
        smp.update_eta(r, st, 1, zero, zero, zero)
        # eta[1] is drawn given the new eta[0] and the old eta[2]
        resid[j] = st.eta[1, 1] - 0.5 * (st.eta[1, 0] + right)
    assert stats.kstest(resid, stats.norm(0, math.sqrt(0.25)).cdf).pvalue > 0.001


def test_update_eta_data_dominates():
    r = rk.make_rng(6)
    smp = sampler_for(np.zeros((4, 1, 3), dtype=int), K=2)
    st = smp.initial_state()
    st.alpha[1] = 1.0
    st.eta0[1] = 5.0
    omega = np.full((4, 1), 1e8)
    d = np.full((4, 1), 1e8 * 0.25)          # data say eta = 0.25 - u - C = 0.25
    smp.update_eta(r, st, 1, omega, np.zeros((4, 1)), d)
    assert st.eta[1, 0] == pytest.approx(0.25, abs=1e-3)


# -- scalar hyperparameters --------------------------------------------------

def test_mu_examples():
    r = rk.make_rng(7)
    q = np.eye(5)
    assert np.mean([draw_mu(r, np.zeros(5), 1.0, q, 10.0) for _ in range(20000)]) == pytest.approx(0, abs=0.02)
    u = np.array([0.5, 1.0, -0.3, 2.0, 0.1])
    V = 1 / (5 + 1 / 10)
    x = np.array([draw_mu(r, u, 1.0, q, 10.0) for _ in range(40000)])
    assert stats.kstest(x, stats.norm(V * u.sum(), math.sqrt(V)).cdf).pvalue > 0.001
    x = np.array([draw_mu(r, u, 1.0, q, 1e12) for _ in range(20000)])
    assert abs(x.mean() - u.mean()) < 4 * math.sqrt(0.2 / 20000)


def test_tau_examples():
    r = rk.make_rng(8)
    q = np.eye(3)
    x = np.array([draw_tau(r, np.full(3, 0.4), 0.4, q, 2.0, 1.5) for _ in range(20000)])
    assert stats.kstest(x, stats.gamma(2.0 + 1.5, scale=1 / 1.5).cdf).pvalue > 0.001
    x = np.array([draw_tau(r, np.array([1.2]), 0.2, np.eye(1), 2.0, 1.5) for _ in range(20000)])
    assert np.all(x > 0)
    assert stats.kstest(x, stats.gamma(2.5, scale=1 / (1.5 + 0.5)).cdf).pvalue > 0.001


def test_alpha_examples():
    r = rk.make_rng(9)
    x = np.array([draw_alpha_rw(r, np.full(4, 0.3), 0.3, 3.0, 1.0) for _ in range(20000)])
    assert stats.kstest(x, stats.invgamma(3.0 + 2.0, scale=1.0).cdf).pvalue > 0.001
    x = np.array([draw_alpha_rw(r, np.array([1.0]), 0.0, 3.0, 1.0) for _ in range(20000)])
    assert np.all(x > 0)
    assert stats.kstest(x, stats.invgamma(3.5, scale=1.5).cdf).pvalue > 0.001


def test_eta0_examples():
    r = rk.make_rng(10)
    x = np.array([draw_eta0(r, 0.0, 1.0, 10.0) for _ in range(20000)])
    assert abs(x.mean()) < 4 * math.sqrt(1 / 1.1 / 20000)
    x = np.array([draw_eta0(r, 2.0, 10.0, 10.0) for _ in range(40000)])
    assert stats.kstest(x, stats.norm(1.0, math.sqrt(5.0)).cdf).pvalue > 0.001
    x = np.array([draw_eta0(r, 2.0, 0.5, 1e14) for _ in range(20000)])
    assert stats.kstest(x, stats.norm(2.0, math.sqrt(0.5)).cdf).pvalue > 0.001


def test_rho_examples():
    r = rk.make_rng(11)
    g = ring_graph(5)
    one = precompute_rho_grid(g, [0.37])
    assert all(draw_rho_index(r, r.normal(size=5), 0.0, 1.0, one) == 0 for _ in range(50))
    grid = precompute_rho_grid(g, np.arange(1, 20) / 20)
    u = np.full(5, 0.3)
    lw = rho_log_weights(u, 0.3, 2.0, grid)
    assert np.allclose(lw, 0.5 * grid.logdet)
    p = np.exp(lw - lw.max())
    p /= p.sum()
    n = 100_000
    idx = np.array([draw_rho_index(r, u, 0.3, 2.0, grid) for _ in range(n)])
    freq = np.bincount(idx, minlength=grid.R) / n
    assert np.all(np.abs(freq - p) < 4 * np.sqrt(p * (1 - p) / n) + 1e-12)


# -- latent incomes and component parameters ---------------------------------

def test_components_empty_is_prior():
    r = rk.make_rng(12)
    counts = np.zeros((4, 1, 3), dtype=int)
    counts[:, 0, 0] = 10
    smp = sampler_for(counts, K=2, c_beta=4.0, a_sigma=3.0, b_sigma=2.0)
    st = smp.initial_state()
    s = np.zeros(counts.shape + (2,), dtype=np.int64)
    s[..., 0] = counts
    b, s2 = [], []
    for _ in range(20000):
        smp.update_components(r, st, s)
        b.append(st.beta[1, 0])
        s2.append(st.sigma2[1])
    assert stats.kstest(b, stats.norm(0, 2.0).cdf).pvalue > 0.001
    assert stats.kstest(s2, stats.invgamma(3.0, scale=2.0).cdf).pvalue > 0.001


def test_components_scalar_conjugacy(monkeypatch):
    counts = np.zeros((2, 1, 3), dtype=int)
    counts[:, 0, 1] = [4, 6]
    smp = sampler_for(counts, K=1, c_beta=7.0)
    st = smp.initial_state()
    st.sigma2[0] = 0.6
    seen = {}
    real_tn, real_mvn = rk.sample_truncnorm, rk.sample_mvn_precision

    def tn(rng, *a):
        seen["y"] = real_tn(rng, *a)
        return seen["y"]

    def mvn(rng, h, P):
        seen.setdefault("hp", (h.copy(), P.copy()))
        return real_mvn(rng, h, P)

    monkeypatch.setattr(rk, "sample_truncnorm", tn)
    monkeypatch.setattr(rk, "sample_mvn_precision", mvn)
    s = counts[..., None].astype(np.int64)
    smp.update_components(rk.make_rng(0), st, s)
    y = seen["y"]
    assert y.size == 10 and np.all((y >= 0) & (y < math.log(3)))
    h, P = seen["hp"]
    want = (y.sum() / 0.6) / (10 / 0.6 + 1 / 7.0)
    assert h[0] / P[0, 0] == pytest.approx(want, rel=1e-12)


def test_components_untruncated_bin_is_normal(monkeypatch):
    counts = np.zeros((1, 1, 2), dtype=int)
    counts[0, 0, 0] = 20000
    panel = make_panel(counts, [0.0, 1e300, np.inf])
    smp = GibbsSampler(panel, ModelConfig(K=1))
    st = smp.initial_state()
    st.beta[0, 0], st.sigma2[0] = 0.3, 0.8
    seen = {}
    real_tn = rk.sample_truncnorm

    def tn(rng, *a):
        seen["y"] = real_tn(rng, *a)
        return seen["y"]

    monkeypatch.setattr(rk, "sample_truncnorm", tn)
    smp.update_components(rk.make_rng(1), st, counts[..., None].astype(np.int64))
    assert stats.kstest(seen["y"], stats.norm(0.3, math.sqrt(0.8)).cdf).pvalue > 0.001


# -- sweeps and chains -------------------------------------------------------

def _small_problem(seed=0):
    r = rk.make_rng(seed)
    counts = r.integers(0, 25, (4, 3, 3))
    return make_panel(counts, BOUNDS), ring_graph(4)


@pytest.mark.parametrize("variant", ["sar_rw", "two_way", "spatial"])
def test_run_chain_deterministic(variant):
    panel, g = _small_problem()
    cfg = ModelConfig(K=2, variant=variant, n_iter=30, burn_in=10, seed=3)
    a = run_chain(panel, cfg, g)
    b = run_chain(panel, cfg, g)
    blocks_a = a.draws if hasattr(a, "draws") else [a]
    blocks_b = b.draws if hasattr(b, "draws") else [b]
    for x, y in zip(blocks_a, blocks_b):
        for name in x._FIELDS:
            assert np.array_equal(getattr(x, name), getattr(y, name), equal_nan=True)


def test_run_chain_empty_and_thinning():
    panel, g = _small_problem()
    d = run_chain(panel, ModelConfig(K=2, n_iter=0, burn_in=5), g)
    assert d.n_draws == 0 and d.beta.shape == (0, 2, 1) and d.u.shape == (0, 2, 4)
    seen = []
    d = run_chain(panel, ModelConfig(K=2, n_iter=12, burn_in=3, thin=4), g,
                  callback=lambda it, st: seen.append((it, st.copy())))
    assert d.n_draws == 3
    kept = [st for it, st in seen if it >= 3 and (it - 3) % 4 == 3]
    for j, st in enumerate(kept):
        assert np.array_equal(d.beta[j], st.beta)


def test_k1_sweep_only_components():
    panel, g = _small_problem()
    cfg = ModelConfig(K=1, n_iter=20, burn_in=0)
    d = run_chain(panel, cfg, g)
    assert np.all(d.u == 0) and np.all(d.eta == 0) and np.all(np.isnan(d.tau))


def test_stored_states_valid_and_log_posterior_finite():
    panel, g = _small_problem(4)
    cfg = ModelConfig(K=3, n_iter=100, burn_in=50)
    grid = build_grid(g, cfg, panel.m)
    d = run_chain(panel, cfg, g, grid=grid)
    for s in range(d.n_draws):
        st = d.state(s)
        st.check()
        assert grid.points[0] <= st.rho[1] <= grid.points[-1]
        assert np.isfinite(log_posterior(panel, st, cfg, grid))


def test_beta_recovery_desk_scale():
    from stmix.simgen import SIM_BETA, generate_setting1

    truth = generate_setting1(rk.make_rng(11), M=30, m=30, T=4, n_range=(200, 300), radius=0.4)
    cfg = ModelConfig(K=3, n_iter=600, burn_in=400, seed=2)
    d = run_chain(truth.panel, cfg, truth.graph)
    mean, sd = d.beta.mean(axis=0), d.beta.std(axis=0)
    # match components by intercept order (labels are arbitrary)
    order = np.argsort(mean[:, 0])
    true_order = np.argsort(SIM_BETA[:, 0])
    z = (mean[order] - SIM_BETA[true_order]) / np.maximum(sd[order], 1e-3)
    assert np.mean(np.abs(z) < 2) >= 7 / 9
    assert np.max(np.abs(mean[order] - SIM_BETA[true_order])) < 0.3
