"""Gibbs sampler for the spatio-temporal log-normal mixture on grouped data.

One sweep updates, in order: component counts, then for every non-reference
component its Polya-gamma variables, spatial effects and temporal effects,
then the scalar hyperparameters (mu, tau, alpha, eta0, rho) and finally the
latent log-incomes with the conjugate (beta, sigma2) draws.

Three effect structures are supported:

``sar_rw``
    SAR spatial effects with a random-walk temporal effect.
``two_way``
    Independent normal spatial and temporal effects.
``spatial``
    Spatial effects only; one chain per period (see :func:`run_chain`).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import gammaln

from . import rng as rk
from .errors import NumericalError
from .model import (
    GroupedPanel,
    LatentState,
    ModelConfig,
    ParamState,
    PosteriorDraws,
    grouped_log_likelihood,
    log_interval_prob,
)
from .spatial import RhoGrid, SpatialGraph, precompute_rho_grid

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Scalar conditionals
# ---------------------------------------------------------------------------

def draw_mu(rng, u, tau, q, c_mu):
    """mu | u ~ N(V tau u' Q 1, V) with V = (tau 1' Q 1 + 1/c_mu)^{-1}."""
    q1 = q.sum(axis=1)
    V = 1.0 / (tau * q1.sum() + 1.0 / c_mu)
    return V * tau * float(u @ q1) + math.sqrt(V) * rng.standard_normal()


def draw_tau(rng, u, mu, q, a_tau, b_tau):
    """tau | u, mu ~ Ga(a + m/2, b + (u - mu)' Q (u - mu) / 2)."""
    v = u - mu
    return float(rk.sample_gamma(rng, a_tau + 0.5 * v.size, b_tau + 0.5 * float(v @ q @ v)))


def draw_alpha_rw(rng, eta, eta0, a_alpha, b_alpha):
    """alpha | eta ~ IG(a + T/2, b + sum of squared increments / 2)."""
    inc = np.diff(np.concatenate([[eta0], eta]))
    return float(rk.sample_inverse_gamma(rng, a_alpha + 0.5 * eta.size, b_alpha + 0.5 * float(inc @ inc)))


def draw_alpha_iid(rng, eta, a_alpha, b_alpha):
    return float(rk.sample_inverse_gamma(rng, a_alpha + 0.5 * eta.size, b_alpha + 0.5 * float(eta @ eta)))


def draw_eta0(rng, eta1, alpha, c_eta):
    """eta0 | eta1 ~ N(V eta1 / alpha, V), V = (1/alpha + 1/c_eta)^{-1}."""
    V = 1.0 / (1.0 / alpha + 1.0 / c_eta)
    return V * eta1 / alpha + math.sqrt(V) * rng.standard_normal()


def rho_log_weights(u, mu, tau, grid: RhoGrid) -> np.ndarray:
    v = u - mu
    return 0.5 * grid.logdet - 0.5 * tau * grid.quad_forms(v)


def draw_rho_index(rng, u, mu, tau, grid: RhoGrid) -> int:
    """Griddy Gibbs: categorical draw over the grid, weights via log-sum-exp."""
    lw = rho_log_weights(u, mu, tau, grid)
    mx = np.max(lw)
    if not np.isfinite(mx):
        raise NumericalError("all rho grid weights are -inf")
    p = np.exp(lw - mx)
    cdf = np.cumsum(p)
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), grid.R - 1))


# ---------------------------------------------------------------------------
# Sampler
# ---------------------------------------------------------------------------

@dataclass
class SweepWorkspace:
    """Per-sweep scratch: nonzero bins and the current predictors."""

    bin_i: np.ndarray = field(default=None)
    bin_t: np.ndarray = field(default=None)
    bin_g: np.ndarray = field(default=None)
    bin_n: np.ndarray = field(default=None)
    lin: np.ndarray = field(default=None)


class GibbsSampler:
    """Holds data-derived caches and runs sweeps over a :class:`ParamState`."""

    def __init__(self, panel: GroupedPanel, config: ModelConfig, grid: RhoGrid | None = None):
        self.panel = panel
        self.config = config
        self.variant = config.variant
        self.has_eta = config.variant != "spatial"
        self.K = config.K
        self.m, self.T = panel.m, panel.T
        self.x = np.ascontiguousarray(panel.x_fit())
        self.x_flat = self.x.reshape(-1, self.x.shape[-1])
        self.log_lo, self.log_hi = panel.classes.log_bounds()
        if config.variant == "two_way" or self.K == 1:
            self.grid = None
            self.q_iid = np.eye(self.m)
        else:
            if grid is None:
                raise ValueError("a RhoGrid is required for SAR variants")
            self.grid = grid
        self.ws = SweepWorkspace()
        self.set_counts(panel.counts, panel.observed)

    # -- data ---------------------------------------------------------------
    def set_counts(self, counts: np.ndarray, observed: np.ndarray | None = None) -> None:
        """Swap in new counts (used by joint-distribution tests)."""
        self.counts = np.asarray(counts, dtype=np.int64)
        if observed is not None:
            self.observed = np.asarray(observed, dtype=bool)
        n = self.counts * self.observed[:, :, None]
        self.N = n.sum(axis=2)
        self.has_data = self.N > 0
        i, t, g = np.nonzero(n)
        self.ws.bin_i, self.ws.bin_t, self.ws.bin_g = i, t, g
        self.ws.bin_n = n[i, t, g]

    def prior_precision(self, state: ParamState, k: int) -> np.ndarray:
        if self.grid is None:
            return self.q_iid
        return self.grid.q_sampled[state.rho_idx[k]]

    # -- initial values ------------------------------------------------------
    def initial_state(self) -> ParamState:
        cfg = self.config
        st = ParamState.initial(self.K, self.x.shape[-1], self.m, self.T)
        st.beta[:, 0] = self._initial_intercepts()
        if self.K > 1:
            st.tau[1:] = 1.0
            st.alpha[1:] = cfg.b_alpha / (cfg.a_alpha - 1.0) if cfg.a_alpha > 1 else cfg.b_alpha
            if self.grid is not None:
                r = int(np.argmin(np.abs(self.grid.points - 0.5)))
                st.rho_idx[1:] = r
                st.rho[1:] = self.grid.points[r]
        return st

    def _initial_intercepts(self) -> np.ndarray:
        mids, weights = [], []
        for t, z in enumerate(self.panel.classes.bounds):
            lo, hi = z[:-1], z[1:]
            mid = np.where(np.isfinite(hi), 0.5 * (lo + hi), 1.5 * lo)
            mid = np.where(lo == 0, 0.5 * hi, mid)
            mids.append(np.log(mid))
            weights.append(self.counts[:, t, : z.size - 1].sum(axis=0))
        mids = np.concatenate(mids)
        w = np.concatenate(weights).astype(float)
        if w.sum() == 0:
            w = np.ones_like(w)
        order = np.argsort(mids)
        cw = np.cumsum(w[order]) / w.sum()
        qs = (np.arange(self.K) + 0.5) / self.K
        return mids[order][np.minimum(np.searchsorted(cw, qs), mids.size - 1)]

    # -- updates -------------------------------------------------------------
    def _linear_predictor(self, state: ParamState) -> np.ndarray:
        lin = state.linear_predictor()
        lin[..., 0] = 0.0
        return lin

    def update_component_counts(self, rng, state: ParamState) -> np.ndarray:
        """Multinomial allocation of each bin's households to components."""
        ws = self.ws
        K = self.K
        s = np.zeros(self.counts.shape + (K,), dtype=np.int64)
        if ws.bin_n.size == 0:
            return s
        if K == 1:
            s[ws.bin_i, ws.bin_t, ws.bin_g, 0] = ws.bin_n
            return s
        lin = self._linear_predictor(state)
        lin = lin - lin.max(axis=-1, keepdims=True)
        log_pi = lin - np.log(np.exp(lin).sum(axis=-1, keepdims=True))
        xb = self.x[ws.bin_i, ws.bin_t] @ state.beta.T
        sd = np.sqrt(state.sigma2)
        a = (self.log_lo[ws.bin_t, ws.bin_g][:, None] - xb) / sd
        b = (self.log_hi[ws.bin_t, ws.bin_g][:, None] - xb) / sd
        lp = log_interval_prob(a, b) + log_pi[ws.bin_i, ws.bin_t]
        mx = lp.max(axis=1, keepdims=True)
        dead = ~np.isfinite(mx[:, 0])
        if dead.any():
            j = int(np.flatnonzero(dead)[0])
            raise NumericalError(
                f"zero probability for occupied bin (area {ws.bin_i[j]}, period {ws.bin_t[j]}, bin {ws.bin_g[j]})"
            )
        p = np.exp(lp - mx)
        s[ws.bin_i, ws.bin_t, ws.bin_g] = rk.sample_multinomial(rng, ws.bin_n, p)
        return s

    def _others_logsumexp(self, lin: np.ndarray, k: int) -> np.ndarray:
        others = np.delete(lin, k, axis=-1)
        mx = others.max(axis=-1)
        return mx + np.log(np.exp(others - mx[..., None]).sum(axis=-1))

    def update_omega(self, rng, state: ParamState, k: int, lin: np.ndarray):
        """PG(N_it, psi_itk) draws for cells with data; returns (omega, C)."""
        C = self._others_logsumexp(lin, k)
        psi = lin[..., k] - C
        omega = np.zeros((self.m, self.T))
        idx = self.has_data
        if idx.any():
            omega[idx] = rk.sample_polya_gamma(rng, self.N[idx], psi[idx], exact_max=self.config.pg_exact_max)
        return omega, C

    def update_u(self, rng, state: ParamState, k: int, omega, C, d) -> None:
        q = self.prior_precision(state, k)
        tau, mu = state.tau[k], state.mu[k]
        P = tau * q
        P[np.diag_indices_from(P)] += omega.sum(axis=1)
        h = (d - omega * (state.eta[k][None, :] - C)).sum(axis=1) + mu * tau * q.sum(axis=1)
        state.u[k] = rk.sample_mvn_precision(rng, h, P)

    def update_eta(self, rng, state: ParamState, k: int, omega, C, d) -> None:
        T = self.T
        alpha = state.alpha[k]
        eta = state.eta[k]
        w_sum = omega.sum(axis=0)
        lik = (d - omega * (state.u[k][:, None] - C)).sum(axis=0)
        z = rng.standard_normal(T)
        if self.variant == "two_way":
            prec = w_sum + 1.0 / alpha
            eta[:] = lik / prec + z / np.sqrt(prec)
            return
        for t in range(T):
            left = state.eta0[k] if t == 0 else eta[t - 1]
            if t < T - 1:
                prec = w_sum[t] + 2.0 / alpha
                e = left + eta[t + 1]
            else:
                prec = w_sum[t] + 1.0 / alpha
                e = left
            eta[t] = (lik[t] + e / alpha) / prec + z[t] / math.sqrt(prec)

    def update_mixing_block(self, rng, state: ParamState, s: np.ndarray) -> np.ndarray:
        """omega -> u -> eta for each non-reference component; returns omega (m, T, K)."""
        s_cell = s.sum(axis=2)
        lin = self._linear_predictor(state)
        omega_all = np.zeros((self.m, self.T, self.K))
        for k in range(1, self.K):
            omega, C = self.update_omega(rng, state, k, lin)
            d = np.where(self.has_data, s_cell[..., k] - 0.5 * self.N, 0.0)
            self.update_u(rng, state, k, omega, C, d)
            if self.has_eta:
                self.update_eta(rng, state, k, omega, C, d)
            lin[..., k] = state.u[k][:, None] + state.eta[k][None, :]
            omega_all[..., k] = omega
        return omega_all

    def update_hyper(self, rng, state: ParamState) -> None:
        cfg = self.config
        for k in range(1, self.K):
            q = self.prior_precision(state, k)
            state.mu[k] = draw_mu(rng, state.u[k], state.tau[k], q, cfg.c_mu)
            state.tau[k] = draw_tau(rng, state.u[k], state.mu[k], q, cfg.a_tau, cfg.b_tau)
            if self.variant == "sar_rw":
                state.alpha[k] = draw_alpha_rw(rng, state.eta[k], state.eta0[k], cfg.a_alpha, cfg.b_alpha)
                state.eta0[k] = draw_eta0(rng, state.eta[k][0], state.alpha[k], cfg.c_eta)
            elif self.variant == "two_way":
                state.alpha[k] = draw_alpha_iid(rng, state.eta[k], cfg.a_alpha, cfg.b_alpha)
            if self.grid is not None:
                r = draw_rho_index(rng, state.u[k], state.mu[k], state.tau[k], self.grid)
                state.rho_idx[k] = r
                state.rho[k] = self.grid.points[r]

    def update_components(self, rng, state: ParamState, s: np.ndarray) -> None:
        """Latent log-incomes from truncated normals, then conjugate beta and sigma2."""
        cfg = self.config
        ws = self.ws
        P = self.x.shape[-1]
        sb = s[ws.bin_i, ws.bin_t, ws.bin_g]              # (nb, K)
        bins, comps = np.nonzero(sb)
        reps = sb[bins, comps]
        xb = self.x[ws.bin_i[bins], ws.bin_t[bins]]         # (npair, P)
        loc = np.einsum("np,np->n", xb, state.beta[comps])
        sd = np.sqrt(state.sigma2[comps])
        owner = np.repeat(np.arange(bins.size), reps)
        lo = self.log_lo[ws.bin_t[bins], ws.bin_g[bins]]
        hi = self.log_hi[ws.bin_t[bins], ws.bin_g[bins]]
        y = rk.sample_truncnorm(rng, loc[owner], sd[owner], lo[owner], hi[owner]) if owner.size else np.zeros(0)
        sum_y = np.bincount(owner, weights=y, minlength=bins.size)
        sum_y2 = np.bincount(owner, weights=y * y, minlength=bins.size)
        eye = np.eye(P) / cfg.c_beta
        for k in range(self.K):
            sel = comps == k
            w = reps[sel].astype(float)
            xk = xb[sel]
            xtx = (xk * w[:, None]).T @ xk
            xty = xk.T @ sum_y[sel]
            yty = float(sum_y2[sel].sum())
            nk = float(w.sum())
            s2 = state.sigma2[k]
            beta = rk.sample_mvn_precision(rng, xty / s2, xtx / s2 + eye)
            rss = max(yty - 2.0 * float(beta @ xty) + float(beta @ xtx @ beta), 0.0)
            state.beta[k] = beta
            state.sigma2[k] = float(rk.sample_inverse_gamma(rng, cfg.a_sigma + 0.5 * nk, cfg.b_sigma + 0.5 * rss))

    def sweep(self, rng, state: ParamState) -> LatentState:
        """One full Gibbs sweep, in place on ``state``."""
        step = "component_counts"
        try:
            s = self.update_component_counts(rng, state)
            omega = np.zeros((self.m, self.T, self.K))
            if self.K > 1:
                step = "mixing_effects"
                omega = self.update_mixing_block(rng, state, s)
                step = "hyperparameters"
                self.update_hyper(rng, state)
            step = "latent_incomes_and_components"
            self.update_components(rng, state, s)
        except NumericalError as exc:
            raise NumericalError(f"{step}: {exc}") from exc
        return LatentState(s=s, omega=omega)


def gibbs_sweep(rng, sampler: GibbsSampler, state: ParamState) -> LatentState:
    return sampler.sweep(rng, state)


# ---------------------------------------------------------------------------
# Priors and joint density
# ---------------------------------------------------------------------------

def sample_prior(rng, config: ModelConfig, n_coef: int, m: int, T: int, grid: RhoGrid | None) -> ParamState:
    """Draw a full parameter state from the prior (reference component pinned)."""
    K = config.K
    st = ParamState.initial(K, n_coef, m, T)
    st.beta = math.sqrt(config.c_beta) * rng.standard_normal((K, n_coef))
    st.sigma2 = np.asarray(rk.sample_inverse_gamma(rng, np.full(K, config.a_sigma), config.b_sigma), dtype=float)
    for k in range(1, K):
        st.mu[k] = math.sqrt(config.c_mu) * rng.standard_normal()
        st.tau[k] = float(rk.sample_gamma(rng, config.a_tau, config.b_tau))
        if config.variant == "two_way" or grid is None:
            q = np.eye(m)
        else:
            r = int(rng.integers(grid.R))
            st.rho_idx[k] = r
            st.rho[k] = grid.points[r]
            q = grid.q_sampled[r]
        st.u[k] = rk.sample_mvn_precision(rng, st.mu[k] * st.tau[k] * q.sum(axis=1), st.tau[k] * q)
        if config.variant == "spatial":
            continue
        st.alpha[k] = float(rk.sample_inverse_gamma(rng, config.a_alpha, config.b_alpha))
        if config.variant == "sar_rw":
            st.eta0[k] = math.sqrt(config.c_eta) * rng.standard_normal()
            st.eta[k] = st.eta0[k] + np.cumsum(math.sqrt(st.alpha[k]) * rng.standard_normal(T))
        else:
            st.eta[k] = math.sqrt(st.alpha[k]) * rng.standard_normal(T)
    return st


def log_prior(state: ParamState, config: ModelConfig, grid: RhoGrid | None) -> float:
    """Log prior density of a state (up to the uniform rho prior)."""
    K = state.K
    P = state.beta.shape[1]
    lp = -0.5 * float(np.sum(state.beta**2)) / config.c_beta - 0.5 * K * P * math.log(2 * math.pi * config.c_beta)
    lp += float(np.sum(_log_ig(state.sigma2, config.a_sigma, config.b_sigma)))
    for k in range(1, K):
        m = state.u.shape[1]
        lp += -0.5 * state.mu[k] ** 2 / config.c_mu - 0.5 * math.log(2 * math.pi * config.c_mu)
        tau = state.tau[k]
        lp += config.a_tau * math.log(config.b_tau) - gammaln(config.a_tau) + (config.a_tau - 1) * math.log(tau) - config.b_tau * tau
        if config.variant == "two_way" or grid is None:
            q, logdet = np.eye(m), 0.0
        else:
            q, logdet = grid.q_sampled[state.rho_idx[k]], grid.logdet[state.rho_idx[k]]
        v = state.u[k] - state.mu[k]
        lp += 0.5 * (logdet + m * math.log(tau) - m * math.log(2 * math.pi)) - 0.5 * tau * float(v @ q @ v)
        if config.variant == "spatial":
            continue
        a = state.alpha[k]
        lp += float(_log_ig(a, config.a_alpha, config.b_alpha))
        if config.variant == "sar_rw":
            lp += -0.5 * state.eta0[k] ** 2 / config.c_eta - 0.5 * math.log(2 * math.pi * config.c_eta)
            inc = np.diff(np.concatenate([[state.eta0[k]], state.eta[k]]))
        else:
            inc = state.eta[k]
        lp += -0.5 * float(inc @ inc) / a - 0.5 * inc.size * math.log(2 * math.pi * a)
    return lp


def _log_ig(x, a, b):
    x = np.asarray(x, dtype=float)
    return a * math.log(b) - gammaln(a) - (a + 1) * np.log(x) - b / x


def log_posterior(panel: GroupedPanel, state: ParamState, config: ModelConfig, grid: RhoGrid | None) -> float:
    return grouped_log_likelihood(panel, state) + log_prior(state, config, grid)


# ---------------------------------------------------------------------------
# Chains
# ---------------------------------------------------------------------------

@dataclass
class PeriodwiseDraws:
    """Independent per-period fits of the spatial-only variant."""

    draws: list[PosteriorDraws]
    config: ModelConfig
    seed: int

    @property
    def n_draws(self) -> int:
        return self.draws[0].n_draws if self.draws else 0

    @property
    def variant(self) -> str:
        return "spatial"


def build_grid(graph: SpatialGraph | None, config: ModelConfig, m: int) -> RhoGrid | None:
    if config.variant == "two_way" or config.K == 1:
        return None
    if graph is None:
        graph = SpatialGraph(np.zeros((m, m)), m)
    return precompute_rho_grid(graph, config.rho_grid, kind=config.sampled_precision)


def run_chain(
    panel: GroupedPanel,
    config: ModelConfig,
    graph: SpatialGraph | None = None,
    grid: RhoGrid | None = None,
    seed: int | None = None,
    callback: Callable[[int, ParamState], None] | None = None,
) -> PosteriorDraws | PeriodwiseDraws:
    """Run burn-in plus ``n_iter`` sweeps and keep every ``thin``-th state."""
    seed = config.seed if seed is None else seed
    if graph is not None and graph.m != panel.m:
        raise ValueError("graph and panel disagree on the number of sampled areas")
    if grid is None:
        grid = build_grid(graph, config, panel.m)
    if config.variant == "spatial":
        streams = rk.split(rk.make_rng(seed), panel.T)
        fits = []
        for t in range(panel.T):
            d = _run_single(panel.period_slice(t), config, grid, streams[t], seed, callback)
            d.period = t
            fits.append(d)
        return PeriodwiseDraws(fits, config, seed)
    return _run_single(panel, config, grid, rk.make_rng(seed), seed, callback)


def _run_single(panel, config, grid, rng, seed, callback) -> PosteriorDraws:
    sampler = GibbsSampler(panel, config, grid)
    state = sampler.initial_state()
    kept = []
    total = config.burn_in + config.n_iter
    t0 = time.perf_counter()
    for it in range(total):
        try:
            sampler.sweep(rng, state)
        except NumericalError as exc:
            raise NumericalError(f"sweep {it}: {exc}") from exc
        if it >= config.burn_in and (it - config.burn_in) % config.thin == config.thin - 1:
            kept.append(state.copy())
        if callback is not None:
            callback(it, state)
        if it and it % 1000 == 0:
            log.debug("sweep %d/%d (%.1fs)", it, total, time.perf_counter() - t0)
    shapes = (config.K, panel.n_coef, panel.m, panel.T)
    return PosteriorDraws.stack(kept, config=config, seed=seed, shapes=shapes, variant=config.variant)
