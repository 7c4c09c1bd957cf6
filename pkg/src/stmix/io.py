"""CSV/JSON file formats.

counts.csv      area_id,period,bin_index,count[,n_total]
classes.csv     period,bin_index,lower,upper          (blank upper = infinity)
covariates.csv  area_id,period,x1,...,xp              (intercept implied)
adjacency.csv   area_id,neighbor_id                   (both directions listed)
partition.csv   area_id,sampled                       (1/0, every area once)
draws.csv       one row per stored sweep; sidecar draws.csv.json holds metadata

Floats are written with 17 significant digits, so files written here load
and re-save byte-identically.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import GroupedPanel, IncomeClasses, ModelConfig, PosteriorDraws
from .spatial import SpatialGraph


def fmt(x: float) -> str:
    x = float(x)
    if math.isinf(x):
        return "" if x > 0 else "-inf"
    return format(x, ".17g")


def _read_rows(path, required: list[str]):
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            rows.append((lineno, dict(zip(header, (c.strip() for c in row)))))
    return header, rows


def _int(path, lineno, col, s) -> int:
    try:
        v = int(s)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {col!r} is not an integer: {s!r}") from None
    return v


def _float(path, lineno, col, s) -> float:
    try:
        return float(s)
    except ValueError:
        raise DataError(f"{path}:{lineno}: column {col!r} is not a number: {s!r}") from None


# ---------------------------------------------------------------------------
# Panel
# ---------------------------------------------------------------------------

def load_classes(path) -> tuple[list[str], IncomeClasses]:
    _, rows = _read_rows(path, ["period", "bin_index", "lower", "upper"])
    per: dict[str, dict[int, tuple[float, float]]] = {}
    for lineno, r in rows:
        g = _int(path, lineno, "bin_index", r["bin_index"])
        lo = _float(path, lineno, "lower", r["lower"])
        hi = math.inf if r["upper"] == "" else _float(path, lineno, "upper", r["upper"])
        d = per.setdefault(r["period"], {})
        if g in d:
            raise DataError(f"{path}:{lineno}: duplicate bin {g} for period {r['period']}")
        d[g] = (lo, hi)
    if not per:
        raise DataError(f"{path}: no income classes")
    periods, bounds = [], []
    for p, d in per.items():
        G = len(d)
        if sorted(d) != list(range(1, G + 1)):
            raise DataError(f"{path}: period {p}: bin indices must be 1..G")
        z = [d[1][0]]
        for g in range(1, G + 1):
            lo, hi = d[g]
            if lo != z[-1]:
                raise DataError(f"{path}: period {p}, bin {g}: lower {lo} != previous upper {z[-1]}")
            if not hi > lo:
                raise DataError(f"{path}: period {p}, bin {g}: boundaries must be increasing")
            z.append(hi)
        periods.append(p)
        bounds.append(np.array(z))
    try:
        return periods, IncomeClasses(bounds)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def load_panel(counts_path, classes_path, covariates_path, area_order: list[str] | None = None,
               n_sampled: int | None = None) -> GroupedPanel:
    """Read and validate the three panel files.

    Without ``area_order`` the sampled areas are those with counts, ordered as
    in the covariates file, followed by the remaining covariate areas.
    """
    periods, classes = load_classes(classes_path)
    G = classes.n_bins
    p_index = {p: t for t, p in enumerate(periods)}

    cheader, crow = _read_rows(covariates_path, ["area_id", "period"])
    xcols = [c for c in cheader if c not in ("area_id", "period")]
    cov: dict[tuple[str, str], list[float]] = {}
    cov_areas: list[str] = []
    cov_periods: list[str] = []
    for lineno, r in crow:
        key = (r["area_id"], r["period"])
        if key in cov:
            raise DataError(f"{covariates_path}:{lineno}: duplicate covariates for {key}")
        cov[key] = [_float(covariates_path, lineno, c, r[c]) for c in xcols]
        if r["area_id"] not in cov_areas:
            cov_areas.append(r["area_id"])
        if r["period"] not in cov_periods:
            cov_periods.append(r["period"])

    cheader2, rows = _read_rows(counts_path, ["area_id", "period", "bin_index", "count"])
    if not rows:
        raise DataError(f"{counts_path}: no observations")
    has_total = "n_total" in cheader2
    cell_counts: dict[tuple[str, str], dict[int, int]] = {}
    declared: dict[tuple[str, str], int] = {}
    count_areas: list[str] = []
    for lineno, r in rows:
        a, p = r["area_id"], r["period"]
        if p not in p_index:
            raise DataError(f"{counts_path}:{lineno}: period {p!r} has no income classes")
        g = _int(counts_path, lineno, "bin_index", r["bin_index"])
        if not 1 <= g <= G[p_index[p]]:
            raise DataError(f"{counts_path}:{lineno}: bin {g} out of range for period {p}")
        n = _int(counts_path, lineno, "count", r["count"])
        if n < 0:
            raise DataError(f"{counts_path}:{lineno}: negative count")
        d = cell_counts.setdefault((a, p), {})
        if g in d:
            raise DataError(f"{counts_path}:{lineno}: duplicate row for area {a}, period {p}, bin {g}")
        d[g] = n
        if has_total and r["n_total"] != "":
            declared[(a, p)] = _int(counts_path, lineno, "n_total", r["n_total"])
        if a not in count_areas:
            count_areas.append(a)
    for key, tot in declared.items():
        if sum(cell_counts[key].values()) != tot:
            raise DataError(f"{counts_path}: area {key[0]}, period {key[1]}: counts sum to "
                            f"{sum(cell_counts[key].values())} but n_total is {tot}")

    if area_order is None:
        unknown = [a for a in count_areas if a not in cov_areas]
        if unknown:
            raise DataError(f"{covariates_path}: no covariates for area {unknown[0]!r}")
        sampled = [a for a in cov_areas if a in set(count_areas)]
        area_order = sampled + [a for a in cov_areas if a not in set(count_areas)]
        n_sampled = len(sampled)
    else:
        area_order = list(area_order)
        if n_sampled is None:
            raise ValueError("n_sampled is required with area_order")
        sampled_set = set(area_order[:n_sampled])
        for a in count_areas:
            if a not in sampled_set:
                raise DataError(f"{counts_path}: counts given for non-sampled or unknown area {a!r}")

    for p in periods:
        if p not in cov_periods:
            raise DataError(f"{covariates_path}: no covariates for period {p!r}")
    all_periods = list(periods) + [p for p in cov_periods if p not in p_index]
    M, T = len(area_order), len(periods)
    x = np.ones((M, len(all_periods), len(xcols) + 1))
    for i, a in enumerate(area_order):
        for t, p in enumerate(all_periods):
            v = cov.get((a, p))
            if v is None:
                raise DataError(f"{covariates_path}: missing covariates for area {a!r}, period {p!r}")
            x[i, t, 1:] = v

    m = n_sampled
    counts = np.zeros((m, T, int(G.max())), dtype=np.int64)
    observed = np.zeros((m, T), dtype=bool)
    a_index = {a: i for i, a in enumerate(area_order)}
    for (a, p), d in cell_counts.items():
        i, t = a_index[a], p_index[p]
        observed[i, t] = True
        for g, n in d.items():
            counts[i, t, g - 1] = n
    try:
        return GroupedPanel(area_order, m, periods, classes, counts, x, observed, all_periods)
    except DataError as exc:
        raise DataError(f"panel: {exc}") from None


def save_panel(panel: GroupedPanel, counts_path, classes_path, covariates_path) -> None:
    with open(classes_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "bin_index", "lower", "upper"])
        for p, z in zip(panel.periods, panel.classes.bounds):
            for g in range(z.size - 1):
                w.writerow([p, g + 1, fmt(z[g]), fmt(z[g + 1])])
    with open(covariates_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        P = panel.n_coef - 1
        w.writerow(["area_id", "period"] + [f"x{j + 1}" for j in range(P)])
        for i, a in enumerate(panel.area_ids):
            for t, p in enumerate(panel.covariate_periods):
                w.writerow([a, p] + [fmt(v) for v in panel.covariates[i, t, 1:]])
    with open(counts_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "period", "bin_index", "count"])
        G = panel.classes.n_bins
        for i in range(panel.m):
            for t, p in enumerate(panel.periods):
                if not panel.observed[i, t]:
                    continue
                for g in range(G[t]):
                    w.writerow([panel.area_ids[i], p, g + 1, int(panel.counts[i, t, g])])


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------

def load_graph(adjacency_path, partition_path) -> SpatialGraph:
    """Edge list plus sampled/non-sampled partition; sampled areas are moved first."""
    _, prow = _read_rows(partition_path, ["area_id", "sampled"])
    ids, flags = [], []
    for lineno, r in prow:
        if r["area_id"] in ids:
            raise DataError(f"{partition_path}:{lineno}: duplicate area {r['area_id']!r}")
        f = _int(partition_path, lineno, "sampled", r["sampled"])
        if f not in (0, 1):
            raise DataError(f"{partition_path}:{lineno}: sampled must be 0 or 1")
        ids.append(r["area_id"])
        flags.append(f)
    if not ids:
        raise DataError(f"{partition_path}: no areas")
    order = [a for a, f in zip(ids, flags) if f] + [a for a, f in zip(ids, flags) if not f]
    pos = {a: i for i, a in enumerate(order)}
    M = len(order)
    A = np.zeros((M, M))
    _, erow = _read_rows(adjacency_path, ["area_id", "neighbor_id"])
    for lineno, r in erow:
        a, b = r["area_id"], r["neighbor_id"]
        for x in (a, b):
            if x not in pos:
                raise DataError(f"{adjacency_path}:{lineno}: unknown area id {x!r}")
        if a == b:
            raise DataError(f"{adjacency_path}:{lineno}: self-loop at area {a!r}")
        A[pos[a], pos[b]] = 1.0
    asym = np.argwhere(A != A.T)
    if asym.size:
        i, j = asym[0]
        raise DataError(f"{adjacency_path}: edge {order[i]!r}-{order[j]!r} is not listed in both directions")
    return SpatialGraph(A, int(sum(flags)), order)


def save_graph(graph: SpatialGraph, adjacency_path, partition_path) -> None:
    with open(partition_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "sampled"])
        for i, a in enumerate(graph.area_ids):
            w.writerow([a, 1 if i < graph.m else 0])
    with open(adjacency_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "neighbor_id"])
        for i, a in enumerate(graph.area_ids):
            for j in graph.neighbors(i):
                w.writerow([a, graph.area_ids[j]])


# ---------------------------------------------------------------------------
# Draws
# ---------------------------------------------------------------------------

def _draw_columns(K: int, P: int, m: int, T: int) -> list[tuple[str, str, tuple]]:
    cols = []
    for k in range(K):
        for j in range(P):
            cols.append((f"beta[{k + 1}][{j}]", "beta", (k, j)))
    for k in range(K):
        cols.append((f"sigma2[{k + 1}]", "sigma2", (k,)))
    for name in ("mu", "tau", "alpha", "rho", "eta0"):
        for k in range(1, K):
            cols.append((f"{name}[{k + 1}]", name, (k,)))
    for k in range(1, K):
        for i in range(m):
            cols.append((f"u[{k + 1}][{i + 1}]", "u", (k, i)))
    for k in range(1, K):
        for t in range(T):
            cols.append((f"eta[{k + 1}][{t + 1}]", "eta", (k, t)))
    return cols


def save_draws(draws, path) -> None:
    """Write draws CSV plus a ``.json`` metadata sidecar (no timestamps)."""
    blocks = draws.draws if hasattr(draws, "draws") else [draws]
    periodwise = hasattr(draws, "draws")
    first = blocks[0]
    K, P, m, T = first.K, first.beta.shape[2], first.u.shape[2], first.eta.shape[2]
    cols = _draw_columns(K, P, m, T)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["period"] if periodwise else []) + ["draw"] + [c[0] for c in cols])
        for b in blocks:
            arrays = {name: getattr(b, name) for name in PosteriorDraws._FIELDS}
            for s in range(b.n_draws):
                row = [str(b.period + 1)] if periodwise else []
                row.append(str(s + 1))
                row.extend(fmt(arrays[name][(s,) + idx]) for _, name, idx in cols)
                w.writerow(row)
    meta = {
        "format": "stmix-draws-1",
        "variant": draws.variant if not periodwise else "spatial",
        "periodwise": periodwise,
        "n_periods": len(blocks),
        "K": K, "n_coef": P, "m": m, "T": T,
        "seed": int(draws.seed),
        "config": draws.config.to_dict(),
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_draws(path):
    """Inverse of :func:`save_draws`."""
    from .gibbs import PeriodwiseDraws

    meta_path = str(path) + ".json"
    if not os.path.exists(meta_path):
        raise DataError(f"{meta_path}: draws metadata not found")
    with open(meta_path) as fh:
        meta = json.load(fh)
    config = ModelConfig.from_dict(meta["config"])
    K, P, m, T = meta["K"], meta["n_coef"], meta["m"], meta["T"]
    cols = _draw_columns(K, P, m, T)
    header, rows = _read_rows(path, ["draw"] + [c[0] for c in cols])
    grid_pts = config.rho_grid
    by_period: dict[int, list] = {}
    for lineno, r in rows:
        key = int(r["period"]) - 1 if meta["periodwise"] else 0
        by_period.setdefault(key, []).append((lineno, r))
    blocks = []
    for per in range(meta["n_periods"]):
        rs = by_period.get(per, [])
        S = len(rs)
        arrays = {
            "beta": np.zeros((S, K, P)), "sigma2": np.zeros((S, K)), "mu": np.zeros((S, K)),
            "u": np.zeros((S, K, m)), "eta": np.zeros((S, K, T)), "eta0": np.zeros((S, K)),
            "tau": np.full((S, K), np.nan), "alpha": np.full((S, K), np.nan), "rho": np.full((S, K), np.nan),
        }
        for s, (lineno, r) in enumerate(rs):
            for cname, name, idx in cols:
                arrays[name][(s,) + idx] = _float(path, lineno, cname, r[cname]) if r[cname] != "" else math.inf
        rho_idx = np.full((S, K), -1, dtype=np.int64)
        if K > 1:
            rho_idx[:, 1:] = np.abs(arrays["rho"][:, 1:, None] - grid_pts).argmin(axis=-1)
        d = PosteriorDraws(**arrays, rho_idx=rho_idx, config=config, seed=meta["seed"],
                           variant=meta["variant"], period=per if meta["periodwise"] else None)
        blocks.append(d)
    if meta["periodwise"]:
        return PeriodwiseDraws(blocks, config, meta["seed"])
    return blocks[0]


# ---------------------------------------------------------------------------
# Config, summaries, manifest
# ---------------------------------------------------------------------------

def load_config(path) -> ModelConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read config: {exc}") from None
    return ModelConfig.from_dict(d)


def save_config(config: ModelConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_summary(table, path) -> None:
    """Long-format summary CSV: area_id,period,quantity,mean,sd,lower,upper."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "period", "quantity", "mean", "sd", "lower", "upper"])
        for q, st in table.stats.items():
            for t, p in enumerate(table.periods):
                for i, a in enumerate(table.area_ids):
                    if np.isnan(st["mean"][i, t]):
                        continue
                    w.writerow([a, p, q] + [fmt(st[k][i, t]) for k in ("mean", "sd", "lower", "upper")])


def load_summary(path, level: float = 0.95):
    from .predict import SummaryTable

    _, rows = _read_rows(path, ["area_id", "period", "quantity", "mean", "sd", "lower", "upper"])
    areas, periods, quantities = [], [], []
    for _, r in rows:
        for lst, key in ((areas, "area_id"), (periods, "period"), (quantities, "quantity")):
            if r[key] not in lst:
                lst.append(r[key])
    ai = {a: i for i, a in enumerate(areas)}
    pi = {p: t for t, p in enumerate(periods)}
    stats = {q: {k: np.full((len(areas), len(periods)), np.nan) for k in ("mean", "sd", "lower", "upper")}
             for q in quantities}
    for lineno, r in rows:
        for k in ("mean", "sd", "lower", "upper"):
            stats[r["quantity"]][k][ai[r["area_id"]], pi[r["period"]]] = _float(path, lineno, k, r[k])
    return SummaryTable(areas, periods, level, stats)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, inputs: dict, config: ModelConfig | None, seed: int | None,
                   timings: dict, argv: list[str] | None = None) -> dict:
    from . import __version__

    man = {
        "inputs": {name: {"path": str(p), "sha256": file_sha256(p)} for name, p in inputs.items() if p},
        "config": config.to_dict() if config else None,
        "seed": seed,
        "version": __version__,
        "argv": argv,
        "timings_s": timings,
        "wall_clock_s": sum(timings.values()),
    }
    with open(path, "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return man


def save_sizes(area_ids, periods, sizes, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "period", "n_total"])
        for i, a in enumerate(area_ids):
            for t, p in enumerate(periods):
                w.writerow([a, p, int(sizes[i, t])])


def load_sizes(path, area_ids, periods) -> np.ndarray:
    _, rows = _read_rows(path, ["area_id", "period", "n_total"])
    ai = {a: i for i, a in enumerate(area_ids)}
    pi = {p: t for t, p in enumerate(periods)}
    out = np.full((len(area_ids), len(periods)), np.nan)
    for lineno, r in rows:
        if r["area_id"] in ai and r["period"] in pi:
            out[ai[r["area_id"]], pi[r["period"]]] = _int(path, lineno, "n_total", r["n_total"])
    return out


def save_truth(table, path) -> None:
    """Truth CSV for simulated data: one row per area and period."""
    G = table.counts.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "period", "sampled", "ai", "mi", "gini", "n_total"]
                   + [f"count[{g + 1}]" for g in range(G)])
        for i, a in enumerate(table.area_ids):
            for t, p in enumerate(table.periods):
                w.writerow([a, p, 1 if i < table.m else 0, fmt(table.ai[i, t]), fmt(table.mi[i, t]),
                            fmt(table.gini[i, t]), int(table.sizes[i, t])]
                           + [int(c) for c in table.counts[i, t]])


def load_truth(path):
    from .simgen import TruthTable

    header, rows = _read_rows(path, ["area_id", "period", "sampled", "ai", "mi", "gini", "n_total"])
    gcols = [c for c in header if c.startswith("count[")]
    areas, periods, sampled = [], [], {}
    for _, r in rows:
        if r["area_id"] not in areas:
            areas.append(r["area_id"])
            sampled[r["area_id"]] = r["sampled"] == "1"
        if r["period"] not in periods:
            periods.append(r["period"])
    m = sum(sampled.values())
    if any(sampled[a] for a in areas[m:]):
        raise DataError(f"{path}: sampled areas must be listed first")
    ai_, pi_ = {a: i for i, a in enumerate(areas)}, {p: t for t, p in enumerate(periods)}
    M, T1 = len(areas), len(periods)
    arr = {k: np.full((M, T1), np.nan) for k in ("ai", "mi", "gini", "n_total")}
    counts = np.zeros((M, T1, len(gcols)), dtype=np.int64)
    for lineno, r in rows:
        i, t = ai_[r["area_id"]], pi_[r["period"]]
        for k in arr:
            arr[k][i, t] = _float(path, lineno, k, r[k])
        counts[i, t] = [_int(path, lineno, c, r[c]) for c in gcols]
    return TruthTable(areas, periods, m, arr["ai"], arr["mi"], arr["gini"], arr["n_total"], counts)
