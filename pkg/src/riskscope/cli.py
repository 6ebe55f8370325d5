"""Command-line entry point: ``riskscope <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import baselines, dlgp, evaluation, simbench
from .dlgp import DlgpConfig, RobustnessLevels
from .lgp import make_grid
from .numerics import make_rng
from .stl import parse


def _floats(text: str) -> list:
    return [float(v) for v in text.split(",")]


def _region(text: str) -> tuple:
    v = _floats(text)
    if len(v) % 2:
        raise argparse.ArgumentTypeError("region needs lo,hi pairs")
    return tuple((v[k], v[k + 1]) for k in range(0, len(v), 2))


def _world(path):
    return simbench.World.load(path) if path else simbench.default_world()


def _formula(path):
    return parse(Path(path).read_text()) if path else simbench.default_formula()


def _sim_config(args) -> simbench.SimConfig:
    return simbench.SimConfig(input_region=args.region, sigmoid=args.sigmoid)


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj) + "\n")


def cmd_simulate(args) -> int:
    levels = RobustnessLevels.parse(args.levels)
    ds = simbench.generate_dataset(args.n, levels, _formula(args.formula),
                                   make_rng(args.seed, evaluation.STREAM_DATASET),
                                   _world(args.world), _sim_config(args))
    ds.to_csv(args.out)
    print(f"wrote {len(ds)} rows to {args.out}; level counts {ds.level_counts().tolist()}")
    return 0


def cmd_truth(args) -> int:
    levels = RobustnessLevels.parse(args.levels)
    grid = make_grid(args.region, args.grid_width)
    truth = simbench.build_truth_proxy(args.m, args.bandwidth, levels, _formula(args.formula),
                                       args.seed, grid, _world(args.world), _sim_config(args),
                                       args.cache_dir)
    truth.save(args.out)
    print(f"wrote truth field to {args.out}; level counts {truth.meta['level_counts']}")
    return 0


def cmd_fit(args) -> int:
    levels = RobustnessLevels.parse(args.levels)
    ds = simbench.LabeledDataset.from_csv(args.data, levels)
    if args.method == "dlgp":
        lam = "opt" if args.lam == "opt" else float(args.lam)
        cfg = DlgpConfig(grid_width=args.grid_width, draws=args.draws, seed=args.seed, lam=lam,
                         count_measure=args.count_measure)
        model = dlgp.fit(ds.inputs, ds.labels, levels, args.region, cfg)
        d = model.to_dict(include_factor=args.with_factor)
        note = f"lambda={model.lam:.6g} (optimum {model.lam_opt:.6g})"
    elif args.method == "dkde":
        model = baselines.dkde_fit(ds.inputs, ds.labels, levels, args.region,
                                   grid_width=args.grid_width)
        d, note = model.to_dict(), ""
    else:
        model = baselines.gdp_fit(ds.inputs, ds.labels, levels, args.region, args.alpha_eps,
                                  args.grid_width, args.draws, args.seed)
        d, note = model.to_dict(), ""
    _write_json(d, args.out)
    print(f"wrote {args.method} model to {args.out} {note}".rstrip())
    return 0


def cmd_query(args) -> int:
    model = evaluation.load_model(json.loads(Path(args.model).read_text()))
    q = model.query(np.array(_floats(args.x)), args.beta)
    print(json.dumps({"x": _floats(args.x), "beta": args.beta, "mean": q.mean.tolist(),
                      "cov": q.cov.tolist(), "lower": q.lower.tolist(),
                      "upper": q.upper.tolist(), "band": q.band}, indent=1))
    return 0


def cmd_evaluate(args) -> int:
    truth = simbench.TruthField.load(args.truth)
    models = {}
    for path in args.models.split(","):
        label = Path(path).stem
        models[label] = evaluation.load_model(json.loads(Path(path).read_text()))
    inputs = None
    if args.data:
        levels = next(iter(models.values())).levels
        inputs = simbench.LabeledDataset.from_csv(args.data, levels).inputs
    report = evaluation.evaluate_models(models, truth, args.beta, inputs)
    evaluation.write_report(report, args.out)
    if args.plots_dir:
        evaluation.write_plot_data(report, args.plots_dir)
    _print_summary(report)
    return 0


def cmd_experiment(args) -> int:
    cfg = evaluation.load_config(args.config)
    if args.out:
        cfg.out = args.out
    if args.plots_dir:
        cfg.plots_dir = args.plots_dir
    report = evaluation.run_experiment(cfg)
    evaluation.write_report(report, cfg.out)
    if cfg.plots_dir:
        evaluation.write_plot_data(report, cfg.plots_dir)
    _print_summary(report)
    print(f"wrote report to {cfg.out}")
    return 0


def _print_summary(report) -> None:
    ns = report["no_sample_ratio"]
    if ns:
        print(f"no-sample ratio: {np.mean(ns):.4f}")
    print(f"{'method':<10} {'mean Ind':>10} {'Cred(1.0)':>10} failures")
    for name, block in report["methods"].items():
        s = block["summary"]
        ind = "absent" if s["ind_overall"] is None else f"{s['ind_overall']:.5f}"
        cred = s["cred_ratio_mean"][-1]
        cred = "-" if cred is None else f"{cred:.4f}"
        print(f"{name:<10} {ind:>10} {cred:>10} {s['failures']}")


def _common_sim(p) -> None:
    p.add_argument("--world", default="", help="world description file (default: shipped world)")
    p.add_argument("--formula", default="", help="STL formula file (default: reach the goal)")
    p.add_argument("--levels", default="-10,0", help="comma-separated level boundaries")
    p.add_argument("--region", type=_region, default=((0.0, 10.0), (0.0, 10.0)),
                   help="input box as lo0,hi0,lo1,hi1")
    p.add_argument("--sigmoid", choices=("printed", "conventional"), default="printed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="riskscope", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a labelled benchmark dataset")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    _common_sim(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("truth", help="build the high-sample truth proxy")
    p.add_argument("--m", type=int, default=100_000)
    p.add_argument("--bandwidth", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--grid-width", type=float, default=0.5)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--out", required=True)
    _common_sim(p)
    p.set_defaults(func=cmd_truth)

    p = sub.add_parser("fit", help="fit an estimator to a dataset CSV")
    p.add_argument("--method", choices=("dlgp", "dkde", "gdp"), default="dlgp")
    p.add_argument("--lambda", dest="lam", default="opt", help="opt or a non-negative number")
    p.add_argument("--data", required=True)
    p.add_argument("--levels", default="-10,0")
    p.add_argument("--region", type=_region, default=((0.0, 10.0), (0.0, 10.0)))
    p.add_argument("--grid-width", type=float, default=0.5)
    p.add_argument("--draws", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--alpha-eps", type=float, default=0.01, help="GDP smoothing constant")
    p.add_argument("--count-measure", choices=dlgp.COUNT_MEASURES, default="density",
                   help="DLGP pseudo-counts per unit volume or per cell (expected counts)")
    p.add_argument("--with-factor", action="store_true",
                   help="store latent covariance factors in a DLGP artifact")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("query", help="query a fitted model at one input")
    p.add_argument("--model", required=True)
    p.add_argument("--x", required=True, help="comma-separated coordinates")
    p.add_argument("--beta", type=float, default=0.05)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="score fitted models against a truth field")
    p.add_argument("--models", required=True, help="comma-separated model files")
    p.add_argument("--truth", required=True)
    p.add_argument("--data", default="", help="dataset CSV for the no-sample ratio")
    p.add_argument("--beta", type=float, default=0.05)
    p.add_argument("--out", required=True)
    p.add_argument("--plots-dir", default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the repeated-fit protocol from a TOML file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="", help="override the report path")
    p.add_argument("--plots-dir", default="")
    p.set_defaults(func=cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"riskscope: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
