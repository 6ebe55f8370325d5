"""Run the repeated-fit robot benchmark and print the Ind / CredRatio tables.

    python scripts/run_benchmark.py                       # desk scale, R=5
    python scripts/run_benchmark.py configs/benchmark.toml
"""
import argparse
import logging

from riskscope import evaluation

log = logging.getLogger("run_benchmark")


def table(report, key):
    head = f"{'method':<9}" + "".join(f"{c:>8.1f}" for c in report["c"])
    rows = [head]
    for name, block in report["methods"].items():
        vals = block["summary"][key]
        rows.append(f"{name:<9}" + "".join("       -" if v is None else f"{v:8.4f}" for v in vals))
    return "\n".join(rows)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config", nargs="?", default="configs/desk.toml")
    ap.add_argument("--out", default="")
    ap.add_argument("--repetitions", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    cfg = evaluation.load_config(args.config)
    if args.out:
        cfg.out = args.out
    if args.repetitions:
        cfg.repetitions = args.repetitions
    log.info("running %d repetitions of %s", cfg.repetitions, ", ".join(cfg.methods))
    report = evaluation.run_experiment(cfg)
    evaluation.write_report(report, cfg.out)
    if cfg.plots_dir:
        evaluation.write_plot_data(report, cfg.plots_dir)

    ns = sum(report["no_sample_ratio"]) / len(report["no_sample_ratio"])
    print(f"no-sample ratio {ns:.3f}\n\nmean Ind(c)\n{table(report, 'ind_mean')}")
    print(f"\nmean CredRatio(c)\n{table(report, 'cred_ratio_mean')}\n")
    for name, block in report["methods"].items():
        print(f"{name:<9} Ind over non-empty bins {block['summary']['ind_overall']:.4f}")
    log.info("report written to %s", cfg.out)


if __name__ == "__main__":
    main()
