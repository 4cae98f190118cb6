"""Agent-level Monte Carlo simulation of user choices under a plan.

Users are homogeneous: each holds ``E0_j / U`` of the baseline in every slot.
Offer groups are contiguous user-index ranges sized from the plan's fractions,
so the only randomness left is in the sampled discomforts and in tie-breaking.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drmech.model import (BasePlan, BroadcastPlan, CostBreakdown, OptimizedPlan, RobustPlan, Scenario,
                          ShiftMatrix)

MODES = ("correlated", "independent")


@dataclass(frozen=True, eq=False)
class Population:
    """Sampled private types.

    ``beta[u, j]`` holds user u's coefficient for origin j (correlated mode);
    ``discomfort[u, j, i]`` holds independent per-pair draws (independent mode).
    """

    n_users: int
    mode: str
    seed: int
    beta: np.ndarray | None = None
    discomfort: np.ndarray | None = None

    def discomfort_from(self, factors: np.ndarray, j: int) -> np.ndarray:
        """``d[u, i]`` for origin slot j, zero for staying."""
        if self.mode == "correlated":
            return self.beta[:, j, None] * factors[j][None, :]
        return self.discomfort[:, j, :]


@dataclass(frozen=True, eq=False)
class SimulationResult:
    shift: ShiftMatrix
    breakdown: CostBreakdown
    # movers[j, i]: users moving j -> i; exposed[j, i]: users for whom j -> i was an option
    movers: np.ndarray
    exposed: np.ndarray

    def __iter__(self):
        return iter((self.shift, self.breakdown))


def sample_population(scenario: Scenario, n_users: int, seed: int, mode: str = "correlated") -> Population:
    if n_users < 1:
        raise ValueError("n_users must be at least 1")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    rng = np.random.default_rng(seed)
    model = scenario.discomfort
    if mode == "correlated":
        return Population(n_users, mode, seed, beta=model.sample(rng, n_users))
    n = scenario.n_slots
    # sample(...) puts the origin on the last axis; move it to axis 1
    draws = np.swapaxes(model.sample(rng, (n_users, n)), 1, 2)
    d = draws * model.distance_factors()[None, :, :]
    return Population(n_users, mode, seed, discomfort=d)


def _group_bounds(fractions, n_users):
    edges = np.rint(np.concatenate(([0.0], np.cumsum(fractions))) * n_users).astype(int)
    return np.minimum(edges, n_users)


def _assign(fractions, destinations, n_users):
    """Destination per user from contiguous index ranges; -1 means no offer."""
    dest = np.full(n_users, -1, dtype=int)
    edges = _group_bounds(fractions, n_users)
    for k, slot in enumerate(destinations):
        dest[edges[k]:edges[k + 1]] = slot
    return dest


def _single_offer(population, factors, discounts_for, fractions_for, n):
    U = population.n_users
    movers = np.zeros((n, n), dtype=np.int64)
    exposed = np.zeros((n, n), dtype=np.int64)
    for j in range(n):
        others = np.array([i for i in range(n) if i != j])
        frac = fractions_for(j)[others]
        dest = _assign(frac, others, U)
        offered = dest >= 0
        exposed[j] = np.bincount(dest[offered], minlength=n)
        if not offered.any():
            continue
        d = population.discomfort_from(factors, j)
        users = np.flatnonzero(offered)
        R = discounts_for(j)[dest[users]]
        accept = R - d[users, dest[users]] > 0
        movers[j] = np.bincount(dest[users][accept], minlength=n)
    return movers, exposed


def simulate_plan(scenario: Scenario, plan, population: Population, tie_seed: int | None = None,
                  allow_independent: bool = False) -> SimulationResult:
    """Realised shift matrix and bill when every sampled user maximises discount minus discomfort.

    Ties between equally attractive slots are broken uniformly at random with a
    generator seeded by ``tie_seed`` (default: derived from the population
    seed), separate from the one that drew the population.
    """
    plan.check(scenario)
    n = scenario.n_slots
    U = population.n_users
    factors = scenario.discomfort.distance_factors()
    share = scenario.baseline / U

    if isinstance(plan, BasePlan):
        movers, exposed = _single_offer(population, factors, lambda j: plan.R,
                                        lambda j: scenario.base_fractions[j], n)
    elif isinstance(plan, OptimizedPlan):
        movers, exposed = _single_offer(population, factors, lambda j: plan.R[j], lambda j: plan.q[j], n)
    elif isinstance(plan, RobustPlan):
        dest = _assign(plan.q, np.arange(n), U)
        sizes = np.bincount(dest[dest >= 0], minlength=n)
        movers = np.zeros((n, n), dtype=np.int64)
        exposed = np.repeat(sizes[None, :], n, axis=0)
        np.fill_diagonal(exposed, 0)
        for j in range(n):
            users = np.flatnonzero((dest >= 0) & (dest != j))
            d = population.discomfort_from(factors, j)
            accept = plan.R[dest[users]] - d[users, dest[users]] > 0
            movers[j] = np.bincount(dest[users][accept], minlength=n)
    elif isinstance(plan, BroadcastPlan):
        if population.mode != "correlated" and not allow_independent:
            raise ValueError("broadcast simulation needs a correlated population "
                             "(pass allow_independent=True to compare against an independent-model reference)")
        tie_rng = np.random.default_rng([population.seed, 1] if tie_seed is None else tie_seed)
        tol = 1e-12 * scenario.flat_rate
        movers = np.zeros((n, n), dtype=np.int64)
        exposed = np.full((n, n), U, dtype=np.int64)
        np.fill_diagonal(exposed, 0)
        for j in range(n):
            util = plan.R[None, :] - population.discomfort_from(factors, j)
            best = util.max(axis=1, keepdims=True)
            tied = util >= best - tol
            keys = np.where(tied, tie_rng.random(util.shape), -1.0)
            choice = keys.argmax(axis=1)
            movers[j] = np.bincount(choice, minlength=n)
    else:
        raise TypeError(f"unknown plan type {type(plan).__name__}")

    stay = U - (movers.sum(axis=1) - np.diag(movers))
    counts = movers.copy()
    np.fill_diagonal(counts, stay)
    entries = counts * share[:, None]
    shift = ShiftMatrix(entries)
    final = shift.final

    off = entries.copy()
    np.fill_diagonal(off, 0.0)
    wasted = 0.0
    if isinstance(plan, BasePlan):
        discounts = float(np.sum(off * plan.R[None, :]))
    elif isinstance(plan, OptimizedPlan):
        discounts = float(np.sum(off * plan.R))
    elif isinstance(plan, RobustPlan):
        retained = sizes * share
        discounts = float(np.sum(plan.R * (retained + off.sum(axis=0))))
        wasted = float(np.sum(plan.R * retained))
    else:
        discounts = float(np.sum(plan.R * final))
        wasted = float(np.sum(plan.R * np.diag(entries)))

    breakdown = CostBreakdown(scenario.production_cost(final), discounts, wasted, scenario.baseline_cost)
    np.fill_diagonal(movers, 0)
    return SimulationResult(shift, breakdown, movers, exposed)


def analytic_fractions(scenario: Scenario, plan) -> np.ndarray:
    """Probability ``p[j, i]`` that an exposed user moves j -> i, from the analytic model."""
    from drmech.probability import accept_matrix, broadcast_shift_matrix

    if isinstance(plan, BasePlan) or isinstance(plan, RobustPlan):
        return accept_matrix(scenario.discomfort, plan.R)
    if isinstance(plan, OptimizedPlan):
        return accept_matrix(scenario.discomfort, plan.R)
    p = broadcast_shift_matrix(scenario.discomfort, plan.R, 0.0, tie_tol=1e-12 * scenario.flat_rate)
    p = p.copy()
    np.fill_diagonal(p, 0.0)
    return p


def binomial_z_scores(result: SimulationResult, p: np.ndarray) -> np.ndarray:
    """``(movers/exposed - p) / sqrt(p(1-p)/exposed)`` per entry; NaN where nothing is exposed.

    Degenerate entries (p in {0, 1}) get 0 when the realised fraction matches
    exactly and inf otherwise.
    """
    exposed = result.exposed.astype(float)
    with np.errstate(divide="ignore", invalid="ignore"):
        frac = result.movers / exposed
        sigma = np.sqrt(p * (1 - p) / exposed)
        z = (frac - p) / sigma
    degenerate = sigma == 0
    z = np.where(degenerate, np.where(np.isclose(frac, p, rtol=0, atol=1e-15), 0.0, np.inf), z)
    z[exposed == 0] = np.nan
    return z
