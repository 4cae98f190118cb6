"""Compare simulated user populations with the analytic shift probabilities.

Optimises each mechanism once, then replays the optima against independently
seeded populations and reports binomial z-score statistics and the relative
error of the realised bill.

    python3 scripts/validate_microsim.py --users 100000 --seeds 10
"""
import argparse
import sys

import numpy as np

from drmech.cli import MECHANISMS as ALL, default_scenario_path, load_scenario
from drmech.microsim import analytic_fractions, binomial_z_scores, sample_population, simulate_plan
from drmech.optimizer import OptimizerOptions, optimize_all

MECHANISMS = tuple(m for m in ALL if m != "dictatorial")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--mu", type=float, default=1 / 3)
    parser.add_argument("--users", type=int, default=100_000)
    parser.add_argument("--seeds", type=int, default=10)
    parser.add_argument("--starts", type=int, default=10)
    args = parser.parse_args(argv)

    scenario = load_scenario(default_scenario_path()).with_mu(args.mu)
    results = optimize_all(scenario, MECHANISMS, OptimizerOptions(starts=args.starts))
    z_all = []
    print(f"{'mechanism':<10} {'max|z|':>8} {'<=2sigma':>9} {'max rel err':>12}")
    for name in MECHANISMS:
        plan = results[name].best_plan
        p = analytic_fractions(scenario, plan)
        analytic = results[name].best_breakdown.total
        zs, errs = [], []
        for seed in range(args.seeds):
            sim = simulate_plan(scenario, plan, sample_population(scenario, args.users, seed))
            z = np.abs(binomial_z_scores(sim, p))
            zs.append(z[~np.isnan(z) & (p > 0) & (p < 1)])
            errs.append(abs(sim.breakdown.total / analytic - 1))
        z = np.concatenate(zs)
        z_all.append(z)
        print(f"{name:<10} {z.max():>8.3f} {np.mean(z <= 2):>9.4f} {max(errs):>12.2e}")
    z = np.concatenate(z_all)
    print(f"all        {z.max():>8.3f} {np.mean(z <= 2):>9.4f}   entries={z.size}, "
          f"beyond 3 sigma={int(np.sum(z > 3))} (nominal {0.0027 * z.size:.1f})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
