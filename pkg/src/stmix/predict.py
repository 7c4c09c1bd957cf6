"""Spatial interpolation, temporal prediction and posterior summaries."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from . import rng as rk
from .errors import DataError, InvalidParameterError
from .model import (
    GroupedPanel,
    PosteriorDraws,
    average_income,
    batch_gini,
    batch_median_income,
    softmax_predictors,
)
from .spatial import RhoGrid

QUANTITIES = ("AI", "MI", "Gini", "share", "count")


@dataclass
class SummaryTable:
    """Posterior summaries per quantity on an (area, period) grid.

    ``stats[q]`` maps ``mean``/``sd``/``lower``/``upper`` to ``(M, T_out)``
    arrays; cells without a value hold NaN.
    """

    area_ids: list[str]
    periods: list[str]
    level: float
    stats: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def merge(self, other: "SummaryTable") -> "SummaryTable":
        """Concatenate along periods (same areas, same quantities)."""
        if other.area_ids != self.area_ids:
            raise ValueError("tables cover different areas")
        stats = {}
        for q in self.stats:
            if q in other.stats:
                stats[q] = {k: np.concatenate([self.stats[q][k], other.stats[q][k]], axis=1) for k in self.stats[q]}
        return SummaryTable(self.area_ids, self.periods + other.periods, self.level, stats)


def interpolate_spatial(rng, draws: PosteriorDraws, grid: RhoGrid | None, n_nonsampled: int | None = None) -> np.ndarray:
    """Draw non-sampled spatial effects given each stored draw, shape ``(S, K, m*)``.

    SAR fits use the Gaussian conditional of the partitioned precision at the
    draw's rho; the two-way fit draws independent N(mu_k, 1/tau_k) effects.
    """
    S, K = draws.n_draws, draws.K
    if grid is not None:
        ms = grid.cond_factor.shape[1]
    elif n_nonsampled is not None:
        ms = n_nonsampled
    else:
        raise ValueError("need a RhoGrid or the number of non-sampled areas")
    out = np.zeros((S, K, ms))
    if ms == 0 or S == 0:
        return out
    for k in range(1, K):
        mu = draws.mu[:, k]
        tau = draws.tau[:, k]
        if draws.variant == "two_way" or grid is None:
            out[:, k] = mu[:, None] + rng.standard_normal((S, ms)) / np.sqrt(tau)[:, None]
            continue
        z = rng.standard_normal((S, ms))
        ridx = draws.rho_idx[:, k]
        for r in np.unique(ridx):
            sel = np.flatnonzero(ridx == r)
            dev = draws.u[sel, k] - mu[sel, None]                       # (n, m)
            mean = mu[sel, None] - dev @ grid.cond_factor[r].T
            noise = solve_triangular(grid.q22_chol[r], z[sel].T, lower=True, trans="T").T
            out[sel, k] = mean + noise / np.sqrt(tau[sel])[:, None]
    return out


def predict_temporal(rng, draws: PosteriorDraws, horizon: float = 1.0) -> np.ndarray:
    """Temporal effects ``horizon`` survey intervals past the last period, ``(S, K)``.

    Random-walk fits draw N(eta_T, horizon * alpha); the two-way fit draws a
    fresh N(0, alpha) effect.
    """
    if not horizon > 0:
        raise InvalidParameterError("horizon must be positive")
    if draws.variant == "spatial":
        raise InvalidParameterError("the spatial-only fit has no temporal effect to predict")
    S, K = draws.n_draws, draws.K
    out = np.zeros((S, K))
    z = rng.standard_normal((S, K - 1))
    alpha = draws.alpha[:, 1:]
    if draws.variant == "two_way":
        out[:, 1:] = np.sqrt(alpha) * z
    else:
        out[:, 1:] = draws.eta[:, 1:, -1] + np.sqrt(horizon * alpha) * z
    return out


def _interval_stats(values: np.ndarray, level: float) -> dict[str, np.ndarray]:
    lo_q = 0.5 * (1.0 - level)
    with np.errstate(invalid="ignore"):
        return {
            "mean": values.mean(axis=0),
            "sd": values.std(axis=0, ddof=1) if values.shape[0] > 1 else np.zeros(values.shape[1:]),
            "lower": np.quantile(values, lo_q, axis=0),
            "upper": np.quantile(values, 1.0 - lo_q, axis=0),
        }


def _period_values(rng, draws, x, u_all, eta_t, bounds, sizes_t, quantities):
    """Per-draw quantities for one period over all areas; arrays lead with the draw axis."""
    lin = u_all + eta_t[:, :, None]                   # (S, K, M)
    lin[:, 0] = 0.0
    w = softmax_predictors(np.swapaxes(lin, 1, 2))     # (S, M, K)
    locs = np.einsum("mp,skp->smk", x, draws.beta)
    s2 = np.broadcast_to(draws.sigma2[:, None, :], locs.shape)
    out = {}
    if "AI" in quantities:
        out["AI"] = average_income(w, locs, s2)
    if "MI" in quantities:
        out["MI"] = batch_median_income(w, locs, s2)
    if "Gini" in quantities:
        out["Gini"] = batch_gini(w, locs, s2)
    if "share" in quantities or "count" in quantities:
        from .simgen import mixture_bin_probs

        probs = mixture_bin_probs(bounds, w, locs, s2)     # (S, M, G)
        G = probs.shape[-1]
        if "share" in quantities:
            for g in range(G):
                out[f"share[{g + 1}]"] = probs[..., g]
        if "count" in quantities and sizes_t is not None:
            known = np.isfinite(sizes_t)
            n = np.where(known, sizes_t, 0).astype(np.int64)
            c = rk.sample_multinomial(rng, np.broadcast_to(n, probs.shape[:2]), probs).astype(float)
            c[:, ~known] = np.nan
            for g in range(G):
                out[f"count[{g + 1}]"] = c[..., g]
    return out


def _all_effects(rng, draws, grid, M):
    m = draws.u.shape[2]
    if M == m:
        return draws.u
    ustar = interpolate_spatial(rng, draws, grid, n_nonsampled=M - m)
    return np.concatenate([draws.u, ustar], axis=2)


def _check_quantities(quantities):
    bad = set(quantities) - set(QUANTITIES)
    if bad:
        raise InvalidParameterError(f"unknown quantities {sorted(bad)}; choose from {QUANTITIES}")


def summarize(
    rng,
    draws,
    panel: GroupedPanel,
    grid: RhoGrid | None = None,
    quantities=("AI",),
    level: float = 0.95,
    sizes: np.ndarray | None = None,
) -> SummaryTable:
    """Summaries for every area (interpolating non-sampled ones) and fitted period.

    ``sizes`` is an optional ``(M, T)`` array of household totals (NaN where
    unknown) used for predictive bin counts; sampled cells default to ``N_it``.
    ``draws`` may be a :class:`PosteriorDraws` or a per-period spatial fit.
    """
    _check_quantities(quantities)
    if not 0 < level < 1:
        raise InvalidParameterError("level must lie in (0, 1)")
    M, T = panel.M, panel.T
    if sizes is None:
        sizes = np.full((M, T), np.nan)
        obs = panel.observed
        sizes[: panel.m] = np.where(obs, panel.totals, np.nan)
    table = SummaryTable(list(panel.area_ids), list(panel.periods), level)
    per_period = []
    for t in range(T):
        d, t_local, g = _draws_for_period(draws, t, grid)
        if d.n_draws == 0:
            raise DataError("cannot summarise an empty draw set")
        u_all = _all_effects(rng, d, g, M)
        vals = _period_values(rng, d, panel.covariates[:, t], u_all, d.eta[:, :, t_local],
                              panel.classes.bounds[t], sizes[:, t], quantities)
        per_period.append({q: _interval_stats(v, level) for q, v in vals.items()})
    _fill(table, per_period)
    return table


def _draws_for_period(draws, t, grid):
    if hasattr(draws, "draws"):             # PeriodwiseDraws
        d = draws.draws[t]
        return d, 0, grid
    return draws, t, grid


def _fill(table: SummaryTable, per_period: list[dict]) -> None:
    keys = []
    for pp in per_period:
        keys.extend(k for k in pp if k not in keys)
    M = len(table.area_ids)
    for q in keys:
        table.stats[q] = {}
        for stat in ("mean", "sd", "lower", "upper"):
            col = [pp[q][stat] if q in pp else np.full(M, np.nan) for pp in per_period]
            table.stats[q][stat] = np.stack(col, axis=1)


def summarize_prediction(
    rng,
    draws: PosteriorDraws,
    panel: GroupedPanel,
    period: str,
    horizon: float = 1.0,
    grid: RhoGrid | None = None,
    quantities=("AI",),
    level: float = 0.95,
    bounds=None,
    sizes: np.ndarray | None = None,
) -> tuple[SummaryTable, np.ndarray]:
    """Summaries for a future period ``horizon`` intervals after the last one.

    Covariates for ``period`` must be present in the panel. Returns the table
    and the predicted temporal effects ``(S, K)``.
    """
    _check_quantities(quantities)
    if period not in panel.covariate_periods:
        raise DataError(f"no covariates for prediction period {period!r}")
    if draws.n_draws == 0:
        raise DataError("cannot summarise an empty draw set")
    tc = panel.covariate_periods.index(period)
    eta_new = predict_temporal(rng, draws, horizon)
    u_all = _all_effects(rng, draws, grid, panel.M)
    bounds = panel.classes.bounds[-1] if bounds is None else np.asarray(bounds, float)
    size_col = None if sizes is None else np.asarray(sizes, float)
    vals = _period_values(rng, draws, panel.covariates[:, tc], u_all, eta_new, bounds, size_col, quantities)
    table = SummaryTable(list(panel.area_ids), [period], level)
    _fill(table, [{q: _interval_stats(v, level) for q, v in vals.items()}])
    return table, eta_new


def summarize_column(values, level: float = 0.95) -> dict[str, float]:
    """Mean, sd and equal-tailed interval of a single draw column."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DataError("cannot summarise an empty draw set")
    st = _interval_stats(v[:, None], level)
    return {k: float(a[0]) for k, a in st.items()}
