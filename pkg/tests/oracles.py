"""Independent reference solvers for small scenarios.

Everything here assumes uniform discomfort on [0, s] with exponent 0, so an
offer of R is accepted with probability min(R / s, 1) regardless of distance.
The formulas are written out from the model directly and share no code with
the package beyond reading scenario fields.
"""
from __future__ import annotations

import numpy as np


def production(scenario, final):
    """Convex piecewise-linear production cost, as the max of its affine pieces (single shared curve)."""
    cost = scenario.cost
    rates = np.asarray(cost.marginal_rates, float)
    bps = np.concatenate(([0.0], np.asarray(cost.breakpoints, float)))
    # piece k: rate_k * e + offset_k, continuous at each breakpoint, zero at 0
    offsets = np.zeros(rates.size)
    for k in range(1, rates.size):
        offsets[k] = offsets[k - 1] + (rates[k - 1] - rates[k]) * bps[k]
    final = np.asarray(final, float)
    pieces = rates * final[..., None] + offsets
    return pieces.max(axis=-1).sum(axis=-1)


def _accept(scenario, R):
    return np.clip(np.asarray(R, float) / scenario.discomfort.scale, 0.0, 1.0)


def grid(step=1e-2):
    return np.linspace(0.0, 1.0, int(round(1 / step)) + 1)


def base_grid(scenario, step=1e-2, chunk=200_000):
    """Minimum base-mechanism cost over a grid on R / B."""
    n, B, e0, q = scenario.n_slots, scenario.flat_rate, scenario.baseline, scenario.base_fractions
    axes = np.meshgrid(*([grid(step)] * n), indexing="ij")
    X = np.stack([a.ravel() for a in axes], axis=1)
    best = (np.inf, None)
    for s in range(0, len(X), chunk):
        R = B * X[s:s + chunk]
        moved = q[None] * _accept(scenario, R)[:, None, :] * e0[None, :, None]
        final = e0 - moved.sum(axis=2) + moved.sum(axis=1)
        total = production(scenario, final) + np.sum(moved * R[:, None, :], axis=(1, 2))
        k = int(np.argmin(total))
        if total[k] < best[0]:
            best = (float(total[k]), R[k])
    return best


def broadcast_grid(scenario, step=1e-2, chunk=100_000):
    """Minimum exact broadcast cost over a grid on R / B.

    With equal slopes a user leaving j goes to the largest discount among the
    other slots when beta < max_k R_k - R_j, splitting equally on exact ties.
    """
    n, B, e0 = scenario.n_slots, scenario.flat_rate, scenario.baseline
    axes = np.meshgrid(*([grid(step)] * n), indexing="ij")
    X = np.stack([a.ravel() for a in axes], axis=1)
    best = (np.inf, None)
    eye = np.eye(n, dtype=bool)
    for s in range(0, len(X), chunk):
        R = B * X[s:s + chunk]
        others = np.where(eye[None], -np.inf, R[:, None, :])               # (b, j, k)
        top = others.max(axis=2)
        winners = others == top[..., None]
        share = winners / winners.sum(axis=2, keepdims=True)
        p = _accept(scenario, np.maximum(top - R, 0.0))                    # (b, j)
        flows = share * (p * e0)[..., None]
        final = e0 - flows.sum(axis=2) + flows.sum(axis=1)
        total = production(scenario, final) + np.sum(R * final, axis=1)
        k = int(np.argmin(total))
        if total[k] < best[0]:
            best = (float(total[k]), R[k])
    return best


def _pairs(scenario, step):
    g = grid(step)
    r, q = np.meshgrid(g, g, indexing="ij")
    return scenario.flat_rate * r.ravel(), q.ravel()


def optimized_grid_2(scenario, step=1e-2, chunk=400):
    """Minimum optimized cost for N = 2 over a grid on (R12/B, q12, R21/B, q21)."""
    e1, e2 = scenario.baseline
    R, q = _pairs(scenario, step)
    a = q * _accept(scenario, R) * e1            # flow 1 -> 2
    b = q * _accept(scenario, R) * e2            # flow 2 -> 1
    pay_a, pay_b = R * a, R * b
    best = np.inf
    for s in range(0, a.size, chunk):
        A, PA = a[s:s + chunk, None], pay_a[s:s + chunk, None]
        final = np.stack((e1 - A + b[None], e2 + A - b[None]), axis=-1)
        total = production(scenario, final) + PA + pay_b[None]
        best = min(best, float(total.min()))
    return best


def robust_grid_2(scenario, step=1e-2, chunk=400):
    """Minimum robust cost for N = 2 over a grid on (R1/B, q1, R2/B, q2) with q1 + q2 <= 1."""
    e1, e2 = scenario.baseline
    R, q = _pairs(scenario, step)
    # group Q1 (offered R1 in slot 1) draws movers from slot 2; Q2 from slot 1
    into1 = q * _accept(scenario, R) * e2
    into2 = q * _accept(scenario, R) * e1
    pay1 = R * (q * e1 + into1)
    pay2 = R * (q * e2 + into2)
    best = np.inf
    for s in range(0, R.size, chunk):
        q1 = q[s:s + chunk, None]
        final = np.stack((e1 + into1[s:s + chunk, None] - into2[None], e2 - into1[s:s + chunk, None] + into2[None]),
                         axis=-1)
        total = production(scenario, final) + pay1[s:s + chunk, None] + pay2[None]
        total = np.where(q1 + q[None] <= 1 + 1e-12, total, np.inf)
        best = min(best, float(total.min()))
    return best


def _production_cvx(cp, scenario, final, unit):
    # final is in units of ``unit`` MWh; returns cost in units of flat_rate * unit dollars
    cost = scenario.cost
    rates = np.asarray(cost.marginal_rates, float) / scenario.flat_rate
    bps = np.concatenate(([0.0], np.asarray(cost.breakpoints, float))) / unit
    offsets = np.zeros(rates.size)
    for k in range(1, rates.size):
        offsets[k] = offsets[k - 1] + (rates[k - 1] - rates[k]) * bps[k]
    return sum(cp.max(cp.hstack([rates[k] * final[i] + offsets[k] for k in range(rates.size)]))
               for i in range(scenario.n_slots))


def _solve(cp, objective, constraints, scale):
    prob = cp.Problem(cp.Minimize(objective), constraints)
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-10, tol_gap_rel=1e-10, tol_feas=1e-10)
    if prob.status != cp.OPTIMAL:
        raise RuntimeError(f"convex oracle did not converge: {prob.status}")
    return float(prob.value) * scale


def optimized_convex(scenario):
    """Global optimized-mechanism optimum via a convex reformulation.

    With acceptance R / s, the flow x = q E0_j R / s pays R x = s x^2 / (q E0_j),
    a perspective (quad-over-lin) term; x <= q E0_j encodes R <= s.  Requires s = B.
    Energies are expressed in units of the mean baseline and money in B times that.
    """
    import cvxpy as cp

    n, B, s = scenario.n_slots, scenario.flat_rate, scenario.discomfort.scale
    assert np.isclose(s, B)
    unit = float(np.mean(scenario.baseline))
    e0 = scenario.baseline / unit
    pairs = [(j, i) for j in range(n) for i in range(n) if i != j]
    x = cp.Variable(len(pairs), nonneg=True)
    q = cp.Variable(len(pairs), nonneg=True)
    pay = sum(cp.quad_over_lin(x[k], q[k]) / e0[j] for k, (j, i) in enumerate(pairs))
    final = [e0[z] - sum(x[k] for k, (j, i) in enumerate(pairs) if j == z)
             + sum(x[k] for k, (j, i) in enumerate(pairs) if i == z) for z in range(n)]
    cons = [x[k] <= q[k] * e0[j] for k, (j, i) in enumerate(pairs)]
    cons += [sum(q[k] for k, (j, i) in enumerate(pairs) if j == z) <= 1 for z in range(n)]
    return _solve(cp, pay + _production_cvx(cp, scenario, final, unit), cons, B * unit)


def robust_convex(scenario):
    """Global robust-mechanism optimum via a convex reformulation.

    With u_i = q_i R_i / s, slot i gains u_i * (others' baseline) and pays
    s u_i E0_i + s u_i^2 O_i / q_i; u_i <= q_i encodes R_i <= s.  Requires s = B.
    """
    import cvxpy as cp

    n, B, s = scenario.n_slots, scenario.flat_rate, scenario.discomfort.scale
    assert np.isclose(s, B)
    unit = float(np.mean(scenario.baseline))
    e0 = scenario.baseline / unit
    others = e0.sum() - e0
    u = cp.Variable(n, nonneg=True)
    q = cp.Variable(n, nonneg=True)
    pay = sum(e0[i] * u[i] + others[i] * cp.quad_over_lin(u[i], q[i]) for i in range(n))
    final = [e0[z] + u[z] * others[z] - e0[z] * sum(u[k] for k in range(n) if k != z) for z in range(n)]
    return _solve(cp, pay + _production_cvx(cp, scenario, final, unit), [u <= q, cp.sum(q) <= 1], B * unit)
