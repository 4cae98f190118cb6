"""Shift matrices and cost breakdowns for the four DR mechanisms.

Every mechanism has an ``evaluate_*`` function returning ``(ShiftMatrix,
CostBreakdown)`` and a ``*_objective`` function returning the total cost (and
optionally its gradient) from raw arrays, which is what the optimizer calls.
Both go through the same shift computation.
"""
from __future__ import annotations

import numpy as np

from drmech.model import (BasePlan, BroadcastPlan, CostBreakdown, OptimizedPlan, PiecewiseLinearCost,
                          RobustPlan, Scenario, ShiftMatrix)
from drmech.probability import accept_density, accept_matrix, broadcast_shift_matrix, broadcast_vjp


def default_base_fractions(n: int) -> np.ndarray:
    """Fixed population fractions of the base mechanism.

    ``q[j, i]`` is proportional to ``1 / (|i - j| + 1)``, normalised over all
    slots k = 1..N (the stay term included), with the diagonal then set to 0.
    """
    if n < 2:
        raise ValueError("n_slots must be at least 2")
    w = 1.0 / (np.abs(np.arange(n)[None, :] - np.arange(n)[:, None]) + 1.0)
    q = w / w.sum(axis=1, keepdims=True)
    np.fill_diagonal(q, 0.0)
    return q


def production_cost(cost, final) -> float:
    """Total production cost of the final consumption vector (one or per-slot curves)."""
    final = np.asarray(final, dtype=float)
    if np.any(final < 0):
        raise ValueError("consumption must be nonnegative")
    if isinstance(cost, PiecewiseLinearCost):
        return float(np.sum(cost(final)))
    return float(sum(c(e) for c, e in zip(cost, final)))


def _final(scenario, moved):
    return scenario.baseline - moved.sum(axis=1) + moved.sum(axis=0)


def _result(scenario, moved, discounts, wasted):
    entries = np.array(moved, dtype=float)
    np.fill_diagonal(entries, scenario.baseline - moved.sum(axis=1))
    shift = ShiftMatrix(entries)
    breakdown = CostBreakdown(
        production=scenario.production_cost(shift.final),
        discounts_paid=float(discounts),
        wasted_discounts=float(wasted),
        baseline_total=scenario.baseline_cost,
    )
    return shift, breakdown


def _off_diagonal(a):
    a = np.array(a, dtype=float)
    np.fill_diagonal(a, 0.0)
    return a


# ---------------------------------------------------------------- base


def _base_moved(scenario, R):
    p = accept_matrix(scenario.discomfort, R)
    return scenario.base_fractions * p * scenario.baseline[:, None], p


def evaluate_base(scenario: Scenario, R):
    plan = BasePlan(R)
    plan.check(scenario)
    moved, _ = _base_moved(scenario, plan.R)
    discounts = float(np.sum(moved * plan.R[None, :]))
    return _result(scenario, moved, discounts, 0.0)


def base_objective(scenario: Scenario, R, gradient: bool = False):
    moved, _ = _base_moved(scenario, R)
    final = _final(scenario, moved)
    total = float(np.sum(moved * R[None, :])) + scenario.production_cost(final)
    if not gradient:
        return total
    m = scenario.marginal_costs(final)
    d_moved = scenario.base_fractions * accept_density(scenario.discomfort, R) * scenario.baseline[:, None]
    gain = R[None, :] + m[None, :] - m[:, None]
    return total, moved.sum(axis=0) + np.sum(d_moved * gain, axis=0)


# ---------------------------------------------------------------- optimized


def _optimized_moved(scenario, R, q):
    p = accept_matrix(scenario.discomfort, R)
    return _off_diagonal(q) * p * scenario.baseline[:, None], p


def evaluate_optimized(scenario: Scenario, R, q):
    plan = OptimizedPlan(R, q)
    plan.check(scenario)
    moved, _ = _optimized_moved(scenario, plan.R, plan.q)
    return _result(scenario, moved, float(np.sum(moved * plan.R)), 0.0)


def optimized_objective(scenario: Scenario, R, q, gradient: bool = False):
    moved, p = _optimized_moved(scenario, R, q)
    final = _final(scenario, moved)
    total = float(np.sum(moved * R)) + scenario.production_cost(final)
    if not gradient:
        return total
    m = scenario.marginal_costs(final)
    e0 = scenario.baseline[:, None]
    gain = R + m[None, :] - m[:, None]
    f = accept_density(scenario.discomfort, R)
    qo = _off_diagonal(q)
    grad_R = moved + qo * f * e0 * gain
    grad_q = _off_diagonal(p * e0 * gain)
    return total, grad_R, grad_q


# ---------------------------------------------------------------- robust


def _robust_moved(scenario, R, q):
    p = accept_matrix(scenario.discomfort, R)
    return q[None, :] * p * scenario.baseline[:, None], p


def _robust_discounts(scenario, R, q, moved):
    retained = q * scenario.baseline
    return float(np.sum(R * (retained + moved.sum(axis=0)))), float(np.sum(R * retained))


def evaluate_robust(scenario: Scenario, R, q):
    plan = RobustPlan(R, q)
    plan.check(scenario)
    moved, _ = _robust_moved(scenario, plan.R, plan.q)
    discounts, wasted = _robust_discounts(scenario, plan.R, plan.q, moved)
    return _result(scenario, moved, discounts, wasted)


def robust_objective(scenario: Scenario, R, q, gradient: bool = False):
    moved, p = _robust_moved(scenario, R, q)
    final = _final(scenario, moved)
    discounts, _ = _robust_discounts(scenario, R, q, moved)
    total = discounts + scenario.production_cost(final)
    if not gradient:
        return total
    m = scenario.marginal_costs(final)
    e0 = scenario.baseline
    gain = R[None, :] + m[None, :] - m[:, None]
    f = accept_density(scenario.discomfort, R)
    grad_R = q * e0 + moved.sum(axis=0) + q * np.sum(f * e0[:, None] * gain, axis=0)
    grad_q = R * e0 + np.sum(p * e0[:, None] * gain, axis=0)
    return total, grad_R, grad_q


# ---------------------------------------------------------------- broadcast


def _broadcast_moved(scenario, R, eps):
    P = broadcast_shift_matrix(scenario.discomfort, R, eps, tie_tol=1e-12 * scenario.flat_rate)
    return P * scenario.baseline[:, None]


def evaluate_broadcast(scenario: Scenario, R, eps: float = 0.0):
    plan = BroadcastPlan(R)
    plan.check(scenario)
    flows = _broadcast_moved(scenario, plan.R, eps)
    final = flows.sum(axis=0)
    discounts = float(np.sum(plan.R * final))
    wasted = float(np.sum(plan.R * np.diag(flows)))
    return _result(scenario, _off_diagonal(flows), discounts, wasted)


def broadcast_objective(scenario: Scenario, R, eps: float = 0.0, gradient: bool = False):
    """Total broadcast cost; without ``gradient``, ``R`` may carry leading batch dimensions."""
    R = np.asarray(R, dtype=float)
    if gradient:
        return _broadcast_objective_grad(scenario, R, eps)
    flows = _broadcast_moved(scenario, R, eps)
    final = flows.sum(axis=-2)
    discounts = np.sum(R * final, axis=-1)
    if isinstance(scenario.cost, PiecewiseLinearCost):
        prod = scenario.cost(final).sum(axis=-1)
    else:
        prod = sum(c(final[..., i]) for i, c in enumerate(scenario.cost))
    return discounts + prod


def _broadcast_objective_grad(scenario, R, eps):
    # the cotangent needs E1, which needs P: evaluate once, then take the VJP
    P = broadcast_shift_matrix(scenario.discomfort, R, eps, tie_tol=1e-12 * scenario.flat_rate)
    e0 = scenario.baseline
    final = e0 @ P
    m = scenario.marginal_costs(final)
    cot = e0[:, None] * (R + m)[None, :]
    _, vjp = broadcast_vjp(scenario.discomfort, R, cot, eps, tie_tol=1e-12 * scenario.flat_rate)
    total = float(np.sum(R * final)) + scenario.production_cost(final)
    return total, final + vjp


# ---------------------------------------------------------------- dispatch


def evaluate(scenario: Scenario, plan, eps: float = 0.0):
    """Shift matrix and breakdown for any plan variant."""
    if isinstance(plan, BasePlan):
        return evaluate_base(scenario, plan.R)
    if isinstance(plan, OptimizedPlan):
        return evaluate_optimized(scenario, plan.R, plan.q)
    if isinstance(plan, RobustPlan):
        return evaluate_robust(scenario, plan.R, plan.q)
    if isinstance(plan, BroadcastPlan):
        return evaluate_broadcast(scenario, plan.R, eps)
    raise TypeError(f"unknown plan type {type(plan).__name__}")


def baseline_breakdown(scenario: Scenario) -> CostBreakdown:
    return CostBreakdown(scenario.baseline_cost, 0.0, 0.0, scenario.baseline_cost)


# ---------------------------------------------------------------- dictatorial


def dictatorial_bound(scenario: Scenario):
    """Cheapest rearrangement of the total demand, ignoring discounts and discomfort.

    Greedy water-filling: cost segments of all slots are filled in order of
    increasing marginal rate; a partially filled rate level is shared in
    proportion to segment capacity (equally among unbounded segments).

    Returns ``(final_consumption, saving)`` with the saving in $ relative to the
    baseline production cost.
    """
    n = scenario.n_slots
    levels: dict[float, list[tuple[int, float]]] = {}
    for slot, cost in enumerate(scenario.costs):
        for rate, cap in cost.segments():
            levels.setdefault(rate, []).append((slot, cap))

    remaining = float(scenario.baseline.sum())
    final = np.zeros(n)
    for rate in sorted(levels):
        if remaining <= 0:
            break
        segs = levels[rate]
        caps = np.array([cap for _, cap in segs])
        slots = np.array([s for s, _ in segs])
        total_cap = caps.sum()
        if remaining >= total_cap:
            np.add.at(final, slots, caps)
            remaining -= total_cap
            continue
        unbounded = np.isinf(caps)
        if unbounded.any():
            share = np.where(unbounded, remaining / unbounded.sum(), 0.0)
        else:
            share = caps * (remaining / total_cap)
        np.add.at(final, slots, share)
        remaining = 0.0

    saving = scenario.baseline_cost - scenario.production_cost(final)
    return final, float(saving)
