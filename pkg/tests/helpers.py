"""Scenario and plan builders shared by the test modules."""
from __future__ import annotations

import numpy as np

from drmech.mechanisms import default_base_fractions
from drmech.model import (BasePlan, BroadcastPlan, DiscomfortModel, OptimizedPlan, PiecewiseLinearCost, RobustPlan,
                          Scenario)

ONTARIO_COST = PiecewiseLinearCost([16300.0, 17900.0], [10.0, 72.46, 91.0])


def toy_scenario(baseline, breakpoints=(16000.0,), rates=(20.0, 80.0), flat_rate=110.0, family="uniform",
                 mu=1.0, scale=None, exponent=None):
    baseline = np.asarray(baseline, float)
    n = baseline.size
    scale = flat_rate if scale is None else scale
    if family == "uniform":
        model = DiscomfortModel.uniform(n, scale, 0.0 if exponent is None else exponent)
    else:
        model = DiscomfortModel.exponential(n, mu, scale, 1.0 if exponent is None else exponent)
    return Scenario(n, baseline, flat_rate, PiecewiseLinearCost(breakpoints, rates), model,
                    default_base_fractions(n))


# interior optimum for every mechanism (no production-cost kink is active)
TOY2 = dict(baseline=(32000.0, 2000.0), breakpoints=(16000.0,), rates=(10.0, 100.0))
# optimum sits on the breakpoint of the middle slot
TOY3 = dict(baseline=(18000.0, 14000.0, 16500.0), breakpoints=(16000.0,), rates=(20.0, 80.0))


def random_scenario(rng, n=None, family=None):
    """Random valid scenario with N <= 8, any discomfort family and a shared or per-slot cost."""
    n = int(rng.integers(2, 9)) if n is None else n
    family = rng.choice(["uniform", "exponential", "tabulated"]) if family is None else family
    baseline = rng.uniform(0.0, 20000.0, n)
    B = float(rng.uniform(20.0, 200.0))

    def curve():
        k = int(rng.integers(0, 4))
        bps = np.sort(rng.choice(np.arange(1000, 30000, 500), size=k, replace=False)).astype(float)
        rates = np.cumsum(rng.uniform(1.0, 50.0, k + 1))
        return PiecewiseLinearCost(bps, rates)

    cost = curve() if rng.random() < 0.7 else [curve() for _ in range(n)]
    t = rng.uniform(0.0, 2.0, n)
    scale = float(rng.uniform(0.5, 2.0) * B)
    if family == "uniform":
        model = DiscomfortModel("uniform", np.ones(n), t, scale)
    elif family == "exponential":
        model = DiscomfortModel("exponential", rng.uniform(0.05, 3.0, n), t, scale)
    else:
        # concave piecewise-linear CDF: decreasing slopes, ending at 1
        xs = np.concatenate(([0.0], np.sort(rng.uniform(0.1, 2.0, 3)) * scale))
        slopes = np.sort(rng.uniform(0.1, 1.0, 3))[::-1]
        F = np.concatenate(([0.0], np.cumsum(slopes * np.diff(xs))))
        model = DiscomfortModel("tabulated", np.ones(n), t, scale, xs, F / F[-1])
    return Scenario(n, baseline, B, cost, model, default_base_fractions(n))


def capped_simplex_point(rng, shape):
    e = rng.exponential(size=shape[:-1] + (shape[-1] + 1,))
    return (e / e.sum(axis=-1, keepdims=True))[..., :-1] * rng.uniform(0.0, 1.0, shape[:-1] + (1,))


def random_plan(rng, scenario, mechanism):
    n, B = scenario.n_slots, scenario.flat_rate
    if mechanism == "base":
        return BasePlan(B * rng.random(n))
    if mechanism == "optimized":
        q = np.zeros((n, n))
        mask = ~np.eye(n, dtype=bool)
        q[mask] = capped_simplex_point(rng, (n, n - 1)).ravel()
        return OptimizedPlan(B * rng.random((n, n)) * mask, q)
    if mechanism == "robust":
        return RobustPlan(B * rng.random(n), capped_simplex_point(rng, (n,)))
    if mechanism == "broadcast":
        R = B * rng.random(n)
        if rng.random() < 0.3:
            # force an exact tie between two slots equidistant from some origin
            j = int(rng.integers(1, n - 1)) if n >= 3 else 0
            if n >= 3:
                R[j + 1] = R[j - 1]
        return BroadcastPlan(R)
    raise ValueError(mechanism)


MECHANISMS = ("base", "optimized", "robust", "broadcast")
