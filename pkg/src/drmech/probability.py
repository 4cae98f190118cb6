"""Acceptance and choice probabilities derived from the discomfort model.

Under the correlated model a user leaving slot j sees option k as the line
``v_k(beta) = R_k - beta * c_jk`` in their private coefficient ``beta``; the user picks
the highest line.  Choice probabilities are therefore F_j-measures of the
beta-intervals on which each line is on top of the upper envelope.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from drmech.model import DiscomfortModel


@dataclass(frozen=True, eq=False)
class ShiftDistribution:
    origin: int
    probabilities: np.ndarray
    tie: bool


def cdf_eval(model: DiscomfortModel, j: int, x) -> float:
    """``F_j(x)`` for a single origin slot."""
    if np.any(np.asarray(x) < 0):
        raise ValueError("x must be nonnegative")
    return model.cdf(x, origins=j)


def single_offer_accept_prob(model: DiscomfortModel, j: int, i: int, R):
    """Probability that a user offered discount R to move from j to i accepts."""
    if i == j:
        raise ValueError("no acceptance probability for the stay option (i == j)")
    c = abs(i - j) ** model.exponent[j]
    return model.cdf(np.asarray(R, dtype=float) / c, origins=j)


def accept_matrix(model: DiscomfortModel, R) -> np.ndarray:
    """``P[j, i] = F_j(R[j, i] / c_ji)`` for every off-diagonal pair; the diagonal is 0.

    ``R`` may be a length-N vector (per-destination discount, broadcast over
    origins) or an N x N matrix.
    """
    c = _factors(model)
    x = np.broadcast_to(np.asarray(R, dtype=float), c.shape) / np.where(c > 0, c, 1.0)
    p = model.cdf(x)
    np.fill_diagonal(p, 0.0)
    return p


def accept_density(model: DiscomfortModel, R) -> np.ndarray:
    """Derivative of :func:`accept_matrix` with respect to the discount."""
    c = _factors(model)
    safe = np.where(c > 0, c, 1.0)
    x = np.broadcast_to(np.asarray(R, dtype=float), c.shape) / safe
    f = model.pdf(x) / safe
    np.fill_diagonal(f, 0.0)
    return f


def _factors(model):
    return _cached_factors(model.exponent.tobytes(), model.n_slots)


@lru_cache(maxsize=64)
def _cached_factors(exponent_bytes, n):
    t = np.frombuffer(exponent_bytes, dtype=float)
    c = DiscomfortModel("uniform", np.ones(n), t, 1.0).distance_factors()
    c.setflags(write=False)
    return c


@lru_cache(maxsize=64)
def _classes(exponent_bytes, n):
    """Boolean ``S[j, k, m]``: options k and m have the same slope seen from j."""
    c = _cached_factors(exponent_bytes, n)
    s = c[:, :, None] == c[:, None, :]
    s.setflags(write=False)
    return s


# ---------------------------------------------------------------- envelope sweep


def upper_envelope(intercepts, slopes):
    """Upper envelope over ``beta >= 0`` of lines ``a_k - c_k * beta``.

    Slopes ``c`` must be pairwise distinct.  Returns ``(index, lo, hi)`` for
    every line that is on top on an interval of positive length, in order of
    increasing beta.
    """
    a = np.asarray(intercepts, dtype=float)
    c = np.asarray(slopes, dtype=float)
    if np.unique(c).size != c.size:
        raise ValueError("slopes must be distinct")
    order = np.argsort(-c, kind="stable")

    def cross(k, m):
        return (a[k] - a[m]) / (c[k] - c[m])

    hull: list[int] = []
    for k in order:
        while len(hull) >= 2 and cross(hull[-2], k) <= cross(hull[-2], hull[-1]):
            hull.pop()
        hull.append(int(k))

    out = []
    lo = -np.inf
    for pos, k in enumerate(hull):
        hi = cross(k, hull[pos + 1]) if pos + 1 < len(hull) else np.inf
        left, right = max(lo, 0.0), hi
        if right > left:
            out.append((k, left, right))
        lo = hi
    return out


def _class_weights(intercepts, members, eps, tie_tol):
    vals = intercepts[members]
    top = vals.max()
    if eps > 0:
        w = np.exp((vals - top) / eps)
        return w / w.sum(), False
    tied = (top - vals) <= tie_tol
    return tied / tied.sum(), bool(tied.sum() > 1)


def broadcast_shift_distribution(model: DiscomfortModel, j: int, R, eps: float = 0.0,
                                 tie_tol: float | None = None) -> ShiftDistribution:
    """Choice distribution of users leaving slot j under the broadcast discounts ``R``.

    Options sharing a slope (slots at equal distance from j) are merged into one
    line carrying their largest discount.  The measure of that line is split
    equally among exactly tied members when ``eps == 0`` and by softmax weights
    with temperature ``eps`` otherwise.
    """
    R = np.asarray(R, dtype=float)
    n = R.size
    if tie_tol is None:
        tie_tol = 1e-12 * model.scale
    c = _factors(model)[j]
    keys, inverse = np.unique(c, return_inverse=True)
    rep_a = np.array([R[inverse == g].max() for g in range(keys.size)])

    probs = np.zeros(n)
    for g, lo, hi in upper_envelope(rep_a, keys):
        mass = float(model.cdf(hi, origins=j) - model.cdf(lo, origins=j))
        members = np.flatnonzero(inverse == g)
        w, _ = _class_weights(R, members, eps, tie_tol)
        probs[members] += mass * w

    tie = False
    for g in range(keys.size):
        members = np.flatnonzero(inverse == g)
        if members.size > 1:
            tie |= _class_weights(R, members, 0.0, tie_tol)[1]
    # stay option absorbs rounding so rows sum to one
    probs[j] += 1.0 - probs.sum()
    return ShiftDistribution(j, probs, tie)


# ---------------------------------------------------------------- batched route


def _envelope_parts(model, R, eps, tie_tol):
    n = model.n_slots
    if tie_tol is None:
        tie_tol = 1e-12 * model.scale
    key = model.exponent.tobytes()
    c = _cached_factors(key, n)
    same = _classes(key, n)

    Rb = R[..., None, None, :]                                   # (..., 1, 1, m)
    top = np.where(same, Rb, -np.inf).max(axis=-1)               # (..., j, k)

    dc = c[:, None, :] - c[:, :, None]                           # c_m - c_k
    num = top[..., :, None, :] - top[..., :, :, None]            # a_m - a_k
    with np.errstate(divide="ignore", invalid="ignore"):
        bound = num / np.where(same, 1.0, dc)
    lower_all = np.where(dc > 0, bound, -np.inf)
    upper_all = np.where(dc < 0, bound, np.inf)
    lower = lower_all.max(axis=-1)
    upper = upper_all.min(axis=-1)
    lo = np.maximum(lower, 0.0)
    hi = np.maximum(upper, lo)
    mass = model.cdf(hi) - model.cdf(lo)

    Rk = np.broadcast_to(R[..., None, :], top.shape)
    if eps > 0:
        w = np.exp((Rk - top) / eps)
    else:
        w = ((top - Rk) <= tie_tol).astype(float)
    w = w / np.einsum("...jm,jkm->...jk", w, same.astype(float))
    return dict(c=c, same=same, top=top, dc=dc, lower=lower, upper=upper, lower_all=lower_all,
                upper_all=upper_all, lo=lo, hi=hi, mass=mass, w=w)


def broadcast_shift_matrix(model: DiscomfortModel, R, eps: float = 0.0,
                           tie_tol: float | None = None) -> np.ndarray:
    """All origins at once: ``P[..., j, i]`` for discount vectors ``R[..., :]``.

    Each line's top interval is the intersection of the half-lines
    ``(c_m - c_k) beta >= a_m - a_k`` over lines of other slopes, so no sweep is
    needed; the O(N^3) work vectorises well for the slot counts used here.
    """
    R = np.asarray(R, dtype=float)
    parts = _envelope_parts(model, R, eps, tie_tol)
    p = parts["mass"] * parts["w"]
    diag = np.arange(model.n_slots)
    p[..., diag, diag] += 1.0 - p.sum(axis=-1)
    return p


def _neighbour(bounds, best, dc, scale, steepest):
    """Index of the line that takes over at each interval end.

    When several lines cross at the same point, the one adjacent on the
    envelope is the shallowest just above the point (upper ends) and the
    steepest just below it (lower ends); the others are on top only at the
    point itself and must not carry the boundary derivative.
    """
    with np.errstate(invalid="ignore"):
        tied = np.abs(bounds - best[..., None]) <= 1e-10 * (np.abs(best[..., None]) + scale)
    key = np.where(tied, dc, -np.inf if steepest else np.inf)
    return key.argmax(axis=-1) if steepest else key.argmin(axis=-1)


def broadcast_vjp(model: DiscomfortModel, R, cotangent, eps: float = 0.0,
                  tie_tol: float | None = None):
    """``P`` and ``sum_{j,i} cotangent[j, i] * dP[j, i] / dR`` for a single discount vector.

    Class intercepts (the largest discount among equidistant slots) are
    differentiated through their argmax; exact-mode tie weights are piecewise
    constant and contribute nothing.
    """
    R = np.asarray(R, dtype=float)
    n = model.n_slots
    parts = _envelope_parts(model, R, eps, tie_tol)
    mass, w, lo, hi = parts["mass"], parts["w"], parts["lo"], parts["hi"]
    p = mass * w
    diag = np.arange(n)
    p[diag, diag] += 1.0 - p.sum(axis=-1)

    G = np.asarray(cotangent, dtype=float)
    cot_mass = G * w
    cot_top = np.zeros((n, n))
    # lines on top only at a single point (several lines crossing there) carry
    # no derivative; _neighbour skips them at the ends of adjacent intervals
    with np.errstate(invalid="ignore"):
        live = parts["upper"] - lo > 1e-10 * (np.abs(lo) + model.scale)
    jj, kk = np.nonzero(live & np.isfinite(parts["upper"]))
    m_hi = _neighbour(parts["upper_all"], parts["upper"], parts["dc"], model.scale, steepest=False)
    if jj.size:
        mm = m_hi[jj, kk]
        coef = cot_mass[jj, kk] * model.pdf(hi[jj, kk], origins=jj) / -parts["dc"][jj, kk, mm]
        np.add.at(cot_top, (jj, kk), coef)
        np.add.at(cot_top, (jj, mm), -coef)
    jj, kk = np.nonzero(live & (parts["lower"] > 0))
    m_lo = _neighbour(parts["lower_all"], parts["lower"], parts["dc"], model.scale, steepest=True)
    if jj.size:
        mm = m_lo[jj, kk]
        coef = cot_mass[jj, kk] * model.pdf(lo[jj, kk], origins=jj) / parts["dc"][jj, kk, mm]
        np.add.at(cot_top, (jj, kk), coef)
        np.add.at(cot_top, (jj, mm), -coef)

    same = parts["same"]
    arg = np.where(same, R[None, None, :], -np.inf).argmax(axis=-1)
    grad = np.bincount(arg.ravel(), weights=cot_top.ravel(), minlength=n)
    if eps > 0:
        cw = G * mass * w
        inner = np.einsum("jm,jkm->jk", cw, same.astype(float))
        grad += np.sum(w * (G * mass) - w * inner, axis=0) / eps
    return p, grad
