"""Command-line interface: ``stmix <command> ...``.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical error.
The default seed comes from ``--seed``, then ``$STMIX_SEED``, then the config.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as sio
from . import rng as rk
from .errors import DataError, InvalidParameterError, NumericalError
from .gibbs import build_grid, run_chain
from .model import ModelConfig

SEED_ENV = "STMIX_SEED"
log = logging.getLogger("stmix")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_range(s: str) -> list[int]:
    try:
        a, b = s.split("..")
        lo, hi = int(a), int(b)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a..b, got {s!r}") from None
    if lo < 1 or hi < lo:
        raise argparse.ArgumentTypeError(f"empty or invalid range {s!r}")
    return list(range(lo, hi + 1))


# ---------------------------------------------------------------------------
# Shared argument groups
# ---------------------------------------------------------------------------

def _add_data(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", type=Path, help="directory holding counts.csv, classes.csv, covariates.csv "
                   "and optionally adjacency.csv, partition.csv")
    for name in ("counts", "classes", "covariates", "adjacency", "partition"):
        g.add_argument(f"--{name}", type=Path, help=f"{name} CSV (overrides --data)")


def _add_config(p):
    g = p.add_argument_group("model")
    g.add_argument("--config", type=Path, help="ModelConfig JSON")
    g.add_argument("-K", type=int, help="number of mixture components")
    g.add_argument("--variant", choices=("sar_rw", "two_way", "spatial"))
    g.add_argument("--iterations", type=int, help="stored-phase sweeps")
    g.add_argument("--burn-in", type=int)
    g.add_argument("--thin", type=int)
    g.add_argument("--seed", type=int)


def _add_summary_opts(p):
    p.add_argument("--quantities", default="AI", help="comma list from AI,MI,Gini,share,count")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--sizes", type=Path, help="CSV area_id,period,n_total for predictive counts")


def _paths(args) -> dict:
    out = {}
    for name in ("counts", "classes", "covariates", "adjacency", "partition"):
        p = getattr(args, name, None)
        if p is None and args.data is not None:
            cand = args.data / f"{name}.csv"
            if cand.exists() or name in ("counts", "classes", "covariates"):
                p = cand
        out[name] = p
    for name in ("counts", "classes", "covariates"):
        if out[name] is None:
            raise UsageError(f"--{name} (or --data) is required")
    if (out["adjacency"] is None) != (out["partition"] is None):
        raise UsageError("--adjacency and --partition go together")
    return out


def _load(args):
    paths = _paths(args)
    graph = None
    if paths["adjacency"] is not None:
        graph = sio.load_graph(paths["adjacency"], paths["partition"])
        panel = sio.load_panel(paths["counts"], paths["classes"], paths["covariates"],
                               area_order=graph.area_ids, n_sampled=graph.m)
    else:
        panel = sio.load_panel(paths["counts"], paths["classes"], paths["covariates"])
    return paths, panel, graph


def _seed(args, config: ModelConfig | None = None) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"${SEED_ENV} must be an integer, got {env!r}") from None
    return config.seed if config is not None else 0


def _config(args) -> ModelConfig:
    cfg = sio.load_config(args.config) if args.config else ModelConfig()
    over = {}
    for attr, key in (("K", "K"), ("variant", "variant"), ("iterations", "n_iter"),
                      ("burn_in", "burn_in"), ("thin", "thin")):
        v = getattr(args, attr, None)
        if v is not None:
            over[key] = v
    cfg = replace(cfg, **over)
    return replace(cfg, seed=_seed(args, cfg))


def _quantities(s: str) -> tuple[str, ...]:
    return tuple(q.strip() for q in s.split(",") if q.strip())


def _sizes(args, panel, periods):
    if args.sizes is None:
        return None
    return sio.load_sizes(args.sizes, panel.area_ids, periods)


def _grid_for(draws, graph, panel):
    cfg = draws.config
    if graph is None and panel.M > panel.m:
        raise DataError("non-sampled areas need --adjacency and --partition")
    return build_grid(graph, cfg, panel.m)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    timings = {}
    t0 = time.perf_counter()
    paths, panel, graph = _load(args)
    config = _config(args)
    timings["load"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    grid = build_grid(graph, config, panel.m)
    timings["grid"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    draws = run_chain(panel, config, graph, grid=grid, seed=config.seed)
    timings["sample"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    sio.save_draws(draws, args.out)
    if args.plots:
        from .plotting import trace_plots

        trace_plots(draws, args.plots)
    timings["write"] = time.perf_counter() - t0
    manifest = args.manifest or Path(str(args.out) + ".manifest.json")
    inputs = {k: v for k, v in paths.items() if v is not None}
    if args.config:
        inputs["config"] = args.config
    sio.write_manifest(manifest, inputs, config, config.seed, timings, argv=args.argv)
    log.info("wrote %d draws to %s", draws.n_draws, args.out)
    return 0


def cmd_summarize(args) -> int:
    from .predict import summarize

    _, panel, graph = _load(args)
    draws = sio.load_draws(args.draws)
    rng = rk.make_rng(_seed(args, draws.config))
    table = summarize(rng, draws, panel, _grid_for(draws, graph, panel), _quantities(args.quantities),
                      args.level, _sizes(args, panel, panel.periods))
    sio.save_summary(table, args.out)
    if args.plots:
        from .plotting import interval_plot, trace_plots

        trace_plots(draws, args.plots)
        for q in table.stats:
            if not q.startswith(("share[", "count[")):
                interval_plot(table, q, args.plots)
    return 0


def cmd_interpolate(args) -> int:
    from .predict import interpolate_spatial

    _, panel, graph = _load(args)
    draws = sio.load_draws(args.draws)
    grid = _grid_for(draws, graph, panel)
    rng = rk.make_rng(_seed(args, draws.config))
    blocks = draws.draws if hasattr(draws, "draws") else [draws]
    ids = panel.area_ids[panel.m:]
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        K = blocks[0].K
        per = hasattr(draws, "draws")
        w.writerow((["period"] if per else []) + ["draw"]
                   + [f"u[{k + 1}][{a}]" for k in range(1, K) for a in ids])
        for b in blocks:
            us = interpolate_spatial(rng, b, grid, n_nonsampled=panel.M - panel.m)
            for s in range(b.n_draws):
                w.writerow(([str(b.period + 1)] if per else []) + [str(s + 1)]
                           + [sio.fmt(v) for v in us[s, 1:].ravel()])
    return 0


def cmd_predict(args) -> int:
    from .predict import summarize_prediction

    _, panel, graph = _load(args)
    draws = sio.load_draws(args.draws)
    if hasattr(draws, "draws"):
        raise InvalidParameterError("the spatial-only fit has no temporal effect to predict")
    period = args.period
    if period is None:
        extra = panel.covariate_periods[panel.T:]
        if not extra:
            raise DataError("covariates file has no period beyond the fitted ones; pass --period")
        period = extra[0]
    rng = rk.make_rng(_seed(args, draws.config))
    sizes = _sizes(args, panel, [period])
    table, eta_new = summarize_prediction(
        rng, draws, panel, period, args.horizon, _grid_for(draws, graph, panel),
        _quantities(args.quantities), args.level, sizes=None if sizes is None else sizes[:, 0],
    )
    sio.save_summary(table, args.out)
    if args.eta_out:
        with open(args.eta_out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["draw"] + [f"eta[{k + 1}]" for k in range(1, draws.K)])
            for s in range(eta_new.shape[0]):
                w.writerow([str(s + 1)] + [sio.fmt(v) for v in eta_new[s, 1:]])
    return 0


def cmd_select_k(args) -> int:
    from .select import select_k

    _, panel, graph = _load(args)
    config = _config(args)
    reports, best = select_k(panel, config, graph, args.range, args.threshold, args.jobs)
    rows = [["K", "matching_fraction", "exact_fraction", "failed", "message"]]
    for r in reports:
        rows.append([r.K, sio.fmt(r.fraction), sio.fmt(r.exact_fraction), int(r.failed), r.message])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    if args.plots:
        from .plotting import matching_plot

        matching_plot(reports, args.plots, args.threshold)
    print(f"selected K = {best}", file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    from .simgen import generate_setting1, generate_setting2

    seed = _seed(args)
    rng = rk.make_rng(seed)
    gen = generate_setting1 if args.setting == 1 else generate_setting2
    lo, hi = args.n_range
    truth = gen(rng, M=args.M, m=args.m, T=args.T, n_range=(lo, hi), radius=args.radius)
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    sio.save_panel(truth.panel, out / "counts.csv", out / "classes.csv", out / "covariates.csv")
    sio.save_graph(truth.graph, out / "adjacency.csv", out / "partition.csv")
    table = truth.table()
    sio.save_truth(table, out / "truth.csv")
    sio.save_sizes(table.area_ids, table.periods, table.sizes, out / "sizes.csv")
    with open(out / "coords.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["area_id", "x", "y"])
        for a, (x, y) in zip(table.area_ids, truth.coords):
            w.writerow([a, sio.fmt(x), sio.fmt(y)])
    return 0


def cmd_evaluate(args) -> int:
    from .simgen import SCOPES, evaluate

    truth = sio.load_truth(args.truth)
    tables = [sio.load_summary(p) for p in args.summary]
    table = tables[0]
    for t in tables[1:]:
        table = table.merge(t)
    scopes = SCOPES if args.scope == "all" else (args.scope,)
    keys = ["scope", "n_cells", "rmse_ai", "coverage_ai", "rmse_count", "coverage_count"]
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(keys)
    for sc in scopes:
        try:
            res = evaluate(truth, table, sc)
        except DataError as exc:
            if args.scope == "all":
                log.warning("skipping scope %s: %s", sc, exc)
                continue
            raise
        w.writerow([res.get(k, "") if not isinstance(res.get(k), float) else sio.fmt(res[k]) for k in keys])
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stmix", description="Spatio-temporal log-normal mixtures for grouped income data.")
    p.add_argument("--version", action="version", version=f"stmix {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="run the Gibbs sampler and write draws")
    _add_data(f)
    _add_config(f)
    f.add_argument("--out", type=Path, required=True, help="draws CSV")
    f.add_argument("--manifest", type=Path, help="run manifest JSON (default <out>.manifest.json)")
    f.add_argument("--plots", type=Path, help="directory for trace plots")
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("summarize", help="posterior summaries for all areas and fitted periods")
    _add_data(s)
    s.add_argument("--draws", type=Path, required=True)
    _add_summary_opts(s)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--plots", type=Path, help="directory for trace and interval plots")
    s.set_defaults(func=cmd_summarize)

    i = sub.add_parser("interpolate", help="draw spatial effects of non-sampled areas")
    _add_data(i)
    i.add_argument("--draws", type=Path, required=True)
    i.add_argument("--seed", type=int)
    i.add_argument("--out", type=Path, required=True)
    i.set_defaults(func=cmd_interpolate)

    r = sub.add_parser("predict", help="summaries for a future period")
    _add_data(r)
    r.add_argument("--draws", type=Path, required=True)
    r.add_argument("--horizon", type=float, default=1.0, help="survey intervals ahead (may be fractional)")
    r.add_argument("--period", help="covariate period label to predict (default: first unfitted one)")
    _add_summary_opts(r)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--eta-out", type=Path, help="CSV of predicted temporal effects")
    r.set_defaults(func=cmd_predict)

    k = sub.add_parser("select-k", help="matching fraction over a range of K")
    _add_data(k)
    _add_config(k)
    k.add_argument("--range", type=_int_range, required=True, help="a..b")
    k.add_argument("--jobs", type=int, default=1)
    k.add_argument("--threshold", type=float, default=0.999)
    k.add_argument("--out", type=Path)
    k.add_argument("--plots", type=Path, help="directory for the matching-fraction figure")
    k.set_defaults(func=cmd_select_k)

    m = sub.add_parser("simulate", help="generate a synthetic data set")
    m.add_argument("--setting", type=int, choices=(1, 2), required=True)
    m.add_argument("--out-dir", type=Path, required=True)
    m.add_argument("--M", type=int, default=60)
    m.add_argument("--m", type=int, default=45)
    m.add_argument("--T", type=int, default=8)
    m.add_argument("--n-range", type=_int_range, default=[100, 300], metavar="a..b")
    m.add_argument("--radius", type=float, default=0.2)
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_simulate)

    e = sub.add_parser("evaluate", help="RMSE and coverage against simulated truth")
    e.add_argument("--truth", type=Path, required=True)
    e.add_argument("--summary", type=Path, nargs="+", required=True)
    e.add_argument("--scope", choices=("in-sample", "spatial", "temporal", "all"), default="all")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.argv = argv
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "n_range", None) is not None:
            args.n_range = (args.n_range[0], args.n_range[-1])
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except InvalidParameterError as exc:
        print(f"stmix: invalid parameter: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"stmix: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"stmix: numerical error: {exc}", file=sys.stderr)
        return 3
    except SystemExit as exc:          # --help / --version
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
