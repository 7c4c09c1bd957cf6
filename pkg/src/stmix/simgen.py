"""Synthetic grouped-income panels, baselines and accuracy metrics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import ndtr

from . import rng as rk
from .errors import DataError
from .model import (
    GroupedPanel,
    IncomeClasses,
    ParamState,
    average_income,
    batch_gini,
    batch_median_income,
    log_interval_prob,
    softmax_predictors,
)
from .spatial import SpatialGraph

SIM_BOUNDS = np.array([0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 7.0, 10.0, 15.0, np.inf])
SIM_BETA = np.array([[0.5, 0.0, 1.0], [-0.5, 1.0, 0.0], [2.0, -1.0, -1.0]])
SIM_SIGMA2 = np.array([0.5, 0.5, 0.5])
SIM_MU = np.array([0.0, -0.2, 0.1])


@dataclass
class SyntheticTruth:
    """Generated areas, true parameters and the resulting grouped panel.

    All per-cell arrays cover every area and ``T + 1`` periods; the last
    period is held out of ``panel`` for temporal prediction.
    """

    coords: np.ndarray
    graph: SpatialGraph
    state: ParamState              # u over all M areas, eta over T + 1 periods
    pi: np.ndarray                 # (M, T+1, K)
    ai: np.ndarray                 # (M, T+1)
    mi: np.ndarray
    gini: np.ndarray
    sizes: np.ndarray              # (M, T+1) household totals
    counts: np.ndarray             # (M, T+1, G)
    covariates: np.ndarray         # (M, T+1, p+1)
    panel: GroupedPanel
    setting: int = 1
    blocks: np.ndarray | None = field(default=None)

    @property
    def m(self) -> int:
        return self.panel.m

    @property
    def T(self) -> int:
        return self.panel.T

    def table(self) -> "TruthTable":
        return TruthTable(list(self.graph.area_ids), list(self.panel.covariate_periods), self.m,
                          self.ai, self.mi, self.gini, self.sizes, self.counts)


@dataclass
class TruthTable:
    """Per-cell true quantities over all areas and ``T + 1`` periods."""

    area_ids: list[str]
    periods: list[str]             # fitted periods then the held-out one
    m: int
    ai: np.ndarray                 # (M, T+1)
    mi: np.ndarray
    gini: np.ndarray
    sizes: np.ndarray
    counts: np.ndarray             # (M, T+1, G)

    @property
    def T(self) -> int:
        return len(self.periods) - 1


def _sar_effects(rng, W, rho, tau, size=None):
    # u = (I - rho W)^{-T} z / sqrt(tau) has precision tau (I - rho W)(I - rho W)^T
    B = np.eye(W.shape[0]) - rho * W
    z = rng.standard_normal(W.shape[0])
    return np.linalg.solve(B.T, z) / math.sqrt(tau)


def mixture_bin_probs(bounds, weights, locs, scale2) -> np.ndarray:
    """Bin probabilities of a log-normal mixture; broadcasts over leading axes."""
    with np.errstate(divide="ignore"):
        lz = np.log(np.asarray(bounds, dtype=float))
    sd = np.sqrt(scale2)
    a = (lz[:-1, None] - locs[..., None, :]) / sd[..., None, :]
    b = (lz[1:, None] - locs[..., None, :]) / sd[..., None, :]
    p = np.exp(log_interval_prob(a, b))
    return np.sum(p * weights[..., None, :], axis=-1)


def _assemble(rng, coords, graph, u_all, eta_all, mu, x, sizes, setting, blocks=None) -> SyntheticTruth:
    M, T1, _ = x.shape
    T = T1 - 1
    m = graph.m
    K = SIM_BETA.shape[0]
    lin = u_all.T[:, None, :] + eta_all.T[None, :, :]
    lin[..., 0] = 0.0
    pi = softmax_predictors(lin)
    locs = x @ SIM_BETA.T
    s2 = np.broadcast_to(SIM_SIGMA2, locs.shape)
    probs = mixture_bin_probs(SIM_BOUNDS, pi, locs, s2)
    counts = rk.sample_multinomial(rng, sizes, probs)
    ai = average_income(pi, locs, s2)
    mi = batch_median_income(pi, locs, s2)
    gini = batch_gini(pi, locs, s2)
    state = ParamState.initial(K, x.shape[-1], M, T1)
    state.beta = SIM_BETA.copy()
    state.sigma2 = SIM_SIGMA2.copy()
    state.mu = mu.copy()
    state.u = u_all
    state.eta = eta_all
    classes = IncomeClasses([SIM_BOUNDS] * T)
    panel = GroupedPanel(
        area_ids=list(graph.area_ids),
        n_sampled=m,
        periods=[str(t + 1) for t in range(T)],
        classes=classes,
        counts=counts[:m, :T],
        covariates=x,
        covariate_periods=[str(t + 1) for t in range(T1)],
    )
    return SyntheticTruth(coords, graph, state, pi, ai, mi, gini, sizes, counts, x, panel, setting, blocks)


def _common(rng, M, m, T, n_range, radius, n_cov, x_range):
    coords = rng.uniform(-1.0, 1.0, size=(M, 2))
    graph = SpatialGraph.from_coordinates(coords, radius, m, [str(i + 1) for i in range(M)])
    sizes = rng.integers(n_range[0], n_range[1] + 1, size=(M, T + 1))
    x = np.ones((M, T + 1, n_cov + 1))
    x[..., 1:] = rng.uniform(x_range[0], x_range[1], size=(M, T + 1, n_cov))
    return coords, graph, sizes, x


def generate_setting1(
    rng,
    M: int = 200,
    m: int = 150,
    T: int = 20,
    n_range=(100, 500),
    radius: float = 0.2,
    x_range=(0.0, 1.0),
    rho=(0.8, 0.8),
    tau=(0.1, 0.1),
    alpha=(0.2, 0.2),
) -> SyntheticTruth:
    """SAR spatial effects and random-walk temporal effects, K = 3."""
    coords, graph, sizes, x = _common(rng, M, m, T, n_range, radius, 2, x_range)
    W = graph.W
    u_all = np.zeros((3, M))
    eta_all = np.zeros((3, T + 1))
    for k in (1, 2):
        u_all[k] = SIM_MU[k] + _sar_effects(rng, W, rho[k - 1], tau[k - 1])
        eta_all[k] = np.cumsum(math.sqrt(alpha[k - 1]) * rng.standard_normal(T + 1))
    truth = _assemble(rng, coords, graph, u_all, eta_all, SIM_MU, x, sizes, 1)
    truth.state.rho[1:] = rho
    truth.state.tau[1:] = tau
    truth.state.alpha[1:] = alpha
    return truth


def setting2_effects(coords, T: int):
    """Deterministic spatial and temporal effects for periods 1..T+1."""
    d1, d2 = coords[:, 0], coords[:, 1]
    u2 = 3.0 * (d1 - d2)
    u3 = 3.0 * (d2 - d1)
    t = np.arange(1, T + 2, dtype=float)
    eta2 = t / 3.0 - (T + 1) / 6.0
    eta3 = t / 6.0 - T / 12.0
    return (u2, u3), (eta2, eta3)


def block_index(coords, n_side: int = 5) -> np.ndarray:
    """Index of the square block of (-1, 1)^2 containing each point."""
    cell = np.clip(np.floor((coords + 1.0) / 2.0 * n_side).astype(int), 0, n_side - 1)
    return cell[:, 0] * n_side + cell[:, 1]


def generate_setting2(
    rng,
    M: int = 200,
    m: int = 150,
    T: int = 20,
    n_range=(100, 500),
    radius: float = 0.2,
    x_range=(0.0, 1.0),
    block_sd: float = 0.2,
) -> SyntheticTruth:
    """Deterministic spatial/temporal trends plus 5x5 block effects, K = 3."""
    coords, graph, sizes, x = _common(rng, M, m, T, n_range, radius, 2, x_range)
    (u2, u3), (eta2, eta3) = setting2_effects(coords, T)
    blocks = block_index(coords)
    a = block_sd * rng.standard_normal((3, 25))
    u_all = np.zeros((3, M))
    u_all[1] = SIM_MU[1] + u2 + a[1, blocks]
    u_all[2] = SIM_MU[2] + u3 + a[2, blocks]
    eta_all = np.zeros((3, T + 1))
    eta_all[1], eta_all[2] = eta2, eta3
    return _assemble(rng, coords, graph, u_all, eta_all, SIM_MU, x, sizes, 2, blocks)


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

@dataclass
class GroupedMLFit:
    mu: float
    sigma2: float
    loglik: float
    converged: bool
    identified: bool


def _grouped_nll(params, lz_lo, lz_hi, n):
    mu, log_s = params
    s = math.exp(log_s)
    lp = log_interval_prob((lz_lo - mu) / s, (lz_hi - mu) / s)
    val = -float(np.sum(n * np.where(n > 0, lp, 0.0)))
    return val if math.isfinite(val) else 1e300


def fit_grouped_ml_lognormal(bounds, counts) -> GroupedMLFit:
    """Maximum-likelihood log-normal fit to one cell's grouped counts.

    Fewer than three occupied classes leave the scale unidentified; the fit
    is then returned with ``identified=False``.
    """
    bounds = np.asarray(bounds, dtype=float)
    n = np.asarray(counts, dtype=float)
    if n.sum() <= 0:
        raise DataError("grouped ML fit needs a positive total count")
    with np.errstate(divide="ignore"):
        lz = np.log(bounds)
    lo, hi = lz[:-1], lz[1:]
    occupied = int(np.count_nonzero(n))
    mid = np.where(np.isfinite(hi) & np.isfinite(lo), 0.5 * (lo + hi), np.where(np.isfinite(lo), lo + 0.5, hi - 0.5))
    m0 = float(np.sum(n * mid) / n.sum())
    s0 = max(float(np.sqrt(np.sum(n * (mid - m0) ** 2) / n.sum())), 0.3)
    res = optimize.minimize(_grouped_nll, [m0, math.log(s0)], args=(lo, hi, n), method="BFGS")
    if not res.success or not np.all(np.isfinite(res.x)):
        res2 = optimize.minimize(_grouped_nll, res.x if np.all(np.isfinite(res.x)) else [m0, math.log(s0)],
                                 args=(lo, hi, n), method="Nelder-Mead",
                                 options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
        if res2.fun <= res.fun:
            res = res2
    mu, log_s = res.x
    return GroupedMLFit(float(mu), float(math.exp(2 * log_s)), -float(res.fun), bool(res.success), occupied >= 3)


def crude_average_income(bounds, counts, top_mid: float = 20.0) -> float:
    """Bin-midpoint average income; the open top class uses ``top_mid``."""
    bounds = np.asarray(bounds, dtype=float)
    counts = np.asarray(counts, dtype=float)
    mids = 0.5 * (bounds[:-1] + bounds[1:])
    if not np.isfinite(bounds[-1]):
        mids[-1] = top_mid
    if counts.sum() <= 0:
        raise DataError("no households in cell")
    return float(np.sum(counts * mids) / counts.sum())


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

SCOPES = ("in-sample", "spatial", "temporal")


def _as_table(truth) -> TruthTable:
    return truth.table() if isinstance(truth, SyntheticTruth) else truth


def scope_cells(truth, scope: str) -> tuple[np.ndarray, np.ndarray]:
    """Area and period indices (into the truth arrays) that a scope covers."""
    truth = _as_table(truth)
    M, m, T = len(truth.area_ids), truth.m, truth.T
    if scope == "in-sample":
        ii, tt = np.meshgrid(np.arange(m), np.arange(T), indexing="ij")
    elif scope == "spatial":
        ii, tt = np.meshgrid(np.arange(m, M), np.arange(T), indexing="ij")
    elif scope == "temporal":
        ii, tt = np.meshgrid(np.arange(M), np.array([T]), indexing="ij")
    else:
        raise ValueError(f"scope must be one of {SCOPES}")
    return ii.ravel(), tt.ravel()


def rmse_and_coverage(truth_values, estimate, lower, upper) -> tuple[float, float]:
    """RMSE of the point estimates and the share of truths inside [lower, upper]."""
    truth_values = np.asarray(truth_values, float)
    err = np.asarray(estimate, float) - truth_values
    rmse = float(np.sqrt(np.mean(err**2)))
    cover = float(np.mean((np.asarray(lower) <= truth_values) & (truth_values <= np.asarray(upper))))
    return rmse, cover


def evaluate(truth, table, scope: str) -> dict:
    """RMSE and coverage of AI (and bin counts, when summarised) over a scope.

    ``table`` is a :class:`stmix.predict.SummaryTable`; cells are matched by
    area id and period label so the table's ordering does not matter.
    """
    truth = _as_table(truth)
    ii, tt = scope_cells(truth, scope)
    area_pos = {a: j for j, a in enumerate(table.area_ids)}
    period_pos = {p: j for j, p in enumerate(table.periods)}
    labels = truth.periods
    try:
        rows = np.array([area_pos[truth.area_ids[i]] for i in ii])
        cols = np.array([period_pos[labels[t]] for t in tt])
    except KeyError as exc:
        raise DataError(f"summary table lacks cell {exc}") from exc
    out = {"scope": scope, "n_cells": int(ii.size)}
    if "AI" in table.stats:
        st = table.stats["AI"]
        out["rmse_ai"], out["coverage_ai"] = rmse_and_coverage(
            truth.ai[ii, tt], st["mean"][rows, cols], st["lower"][rows, cols], st["upper"][rows, cols]
        )
    count_keys = sorted((q for q in table.stats if q.startswith("count[")), key=lambda q: int(q[6:-1]))
    if count_keys:
        tv, est, lo, hi = [], [], [], []
        for q in count_keys:
            g = int(q[6:-1]) - 1
            st = table.stats[q]
            tv.append(truth.counts[ii, tt, g])
            est.append(st["mean"][rows, cols])
            lo.append(st["lower"][rows, cols])
            hi.append(st["upper"][rows, cols])
        out["rmse_count"], out["coverage_count"] = rmse_and_coverage(
            np.concatenate(tv), np.concatenate(est), np.concatenate(lo), np.concatenate(hi)
        )
    return out
