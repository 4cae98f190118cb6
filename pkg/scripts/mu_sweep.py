"""Optimise every mechanism on the shipped 24-hour scenario over a range of flexibilities.

Writes results.csv, savings.svg and components.svg to --out and prints a
savings table (percent of the flat-rate production cost).

    python3 scripts/mu_sweep.py --out results/sweep --starts 100
"""
import argparse
import sys
from pathlib import Path

from drmech.cli import MECHANISMS, RunManifest, default_scenario_path, read_results, run
from drmech.optimizer import OptimizerOptions


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--scenario", type=Path, default=default_scenario_path())
    parser.add_argument("--out", type=Path, default=Path("results/sweep"))
    parser.add_argument("--starts", type=int, default=OptimizerOptions.starts)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--mu", type=float, nargs="+", default=[1 / 10, 1 / 6, 1 / 3, 1.0])
    args = parser.parse_args(argv)

    manifest = RunManifest(args.scenario, MECHANISMS,
                           OptimizerOptions(starts=args.starts, seed=args.seed), tuple(args.mu), args.out)
    status = run(manifest)

    rows = read_results(args.out / "results.csv")
    names = list(dict.fromkeys(r["mechanism"] for r in rows))
    table = {}
    for r in rows:
        table.setdefault(float(r["mu"]), {})[r["mechanism"]] = 100 * float(r["savings_fraction"])
    print("mu       " + "".join(f"{n:>13}" for n in names))
    for mu in sorted(table):
        print(f"{mu:<9.4g}" + "".join(f"{table[mu].get(n, float('nan')):>12.2f}%" for n in names))
    return status


if __name__ == "__main__":
    sys.exit(main())
