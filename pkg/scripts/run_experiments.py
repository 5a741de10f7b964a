"""Run the experiment configs in scripts/configs and print result tables.

    python scripts/run_experiments.py                    # everything (hours)
    python scripts/run_experiments.py example1_spatial_k1 example2_temporal
    python scripts/run_experiments.py --quick example1_compare   # first level only

CSV files are written to ``--outdir`` (default ``results/``).
"""
import argparse
import logging
from dataclasses import replace
from pathlib import Path

from polyvem.analysis import emit_comparison, emit_report
from polyvem.cli import run_compare, run_convergence
from polyvem.config import load_config

CONFIGS = Path(__file__).resolve().parent / "configs"


def show_report(report):
    print(f"{'param':>10} {'sp':>3} {'e0':>11} {'roc0':>6} {'e1':>11} {'roc1':>6} {'sec':>8}")
    for r in report.rows:
        print(f"{r.param:10.5g} {r.species:3d} {r.e0:11.4e} {_rate(r.roc0)} "
              f"{r.e1:11.4e} {_rate(r.roc1)} {r.seconds:8.1f}")


def show_comparison(rows):
    print(f"{'h':>8} {'H':>7} {'sp':>3} {'e0 iter':>11} {'e0 2grid':>11} {'rel0':>8} "
          f"{'e1 iter':>11} {'e1 2grid':>11} {'rel1':>8} {'t iter':>8} {'t 2grid':>8}")
    for r in rows:
        print(f"{r.param:8.5g} {r.coarse:7.4g} {r.species:3d} {r.e0_iteration:11.4e} "
              f"{r.e0_twogrid:11.4e} {r.rel0:8.1e} {r.e1_iteration:11.4e} "
              f"{r.e1_twogrid:11.4e} {r.rel1:8.1e} {r.seconds_iteration:8.1f} "
              f"{r.seconds_twogrid:8.1f}")


def _rate(v):
    return f"{'':>6}" if v is None else f"{v:6.2f}"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("names", nargs="*", help="config names (default: all)")
    ap.add_argument("--outdir", default="results")
    ap.add_argument("--quick", action="store_true", help="run only the first sweep level")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    names = args.names or sorted(p.stem for p in CONFIGS.glob("*.yaml"))
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name in names:
        cfg = load_config(CONFIGS / f"{name}.yaml")
        cfg = replace(cfg, output=str(outdir / Path(cfg.output).name))
        if args.quick:
            cfg = replace(cfg, h_values=cfg.h_values[:1], coarse_h=cfg.coarse_h[:1],
                          dt_values=cfg.dt_values[:2])
        print(f"== {name}")
        if "compare" in name:
            rows = run_compare(cfg)
            show_comparison(rows)
            emit_comparison(rows, cfg.output)
        else:
            report = run_convergence(cfg)
            show_report(report)
            emit_report(report, cfg.output)
        print(f"-> {cfg.output}\n")


if __name__ == "__main__":
    main()
