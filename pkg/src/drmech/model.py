"""Domain types: scenarios, cost curves, discomfort distributions, plans, results.

Energies are in MWh, prices and discounts in $/MWh, costs in $.
All array-valued fields are stored as read-only numpy arrays so the types can be
shared between worker threads.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence, Union

import numpy as np

FAMILIES = ("uniform", "exponential", "tabulated")
MECHANISMS = ("base", "optimized", "robust", "broadcast")


class ScenarioError(ValueError):
    """Invalid scenario data. ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(message)
        self.field = field


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PiecewiseLinearCost:
    """Convex piecewise-linear production cost with ``cost(0) = 0``.

    ``marginal_rates[k]`` applies between ``breakpoints[k-1]`` and
    ``breakpoints[k]`` (with implicit 0 and +inf at the ends).
    """

    breakpoints: np.ndarray
    marginal_rates: np.ndarray

    def __post_init__(self):
        bp = _frozen(np.atleast_1d(self.breakpoints) if len(np.atleast_1d(self.breakpoints)) else [])
        rates = _frozen(np.atleast_1d(self.marginal_rates))
        if rates.size != bp.size + 1:
            raise ScenarioError("marginal_rates", "need exactly one more marginal rate than breakpoints")
        if np.any(~np.isfinite(bp)) or np.any(~np.isfinite(rates)):
            raise ScenarioError("cost", "cost parameters must be finite")
        if bp.size and (bp[0] <= 0 or np.any(np.diff(bp) <= 0)):
            raise ScenarioError("breakpoints_mwh", "breakpoints must be positive and strictly increasing")
        if np.any(np.diff(rates) <= 0):
            raise ScenarioError("marginal_rates", "marginal rates must be strictly increasing")
        if rates[0] <= 0:
            raise ScenarioError("marginal_rates", "marginal rates must be positive")
        object.__setattr__(self, "breakpoints", bp)
        object.__setattr__(self, "marginal_rates", rates)
        # cumulative cost at each breakpoint, used by __call__
        widths = np.diff(np.concatenate(([0.0], bp)))
        object.__setattr__(self, "_knot_costs", _frozen(np.concatenate(([0.0], np.cumsum(widths * rates[:-1])))))
        object.__setattr__(self, "_knots", _frozen(np.concatenate(([0.0], bp))))

    def __call__(self, energy):
        e = np.asarray(energy, dtype=float)
        seg = np.searchsorted(self.breakpoints, e, side="right")
        return self._knot_costs[seg] + self.marginal_rates[seg] * (e - self._knots[seg])

    def marginal(self, energy):
        """Right derivative of the cost (the rate of the segment starting at ``energy``)."""
        e = np.asarray(energy, dtype=float)
        return self.marginal_rates[np.searchsorted(self.breakpoints, e, side="right")]

    def segments(self):
        """List of ``(rate, capacity)`` pairs; the last capacity is ``inf``."""
        widths = np.diff(np.concatenate(([0.0], self.breakpoints, [np.inf])))
        return list(zip(self.marginal_rates.tolist(), widths.tolist()))

    def smoothed(self, width: float) -> PiecewiseLinearCost:
        """Copy whose kinks are rounded quadratically over ``breakpoint +/- width``."""
        if width <= 0:
            return self
        return SmoothedCost(self.breakpoints, self.marginal_rates, float(width))


@dataclass(frozen=True, eq=False)
class SmoothedCost(PiecewiseLinearCost):
    """Piecewise-linear cost with every kink replaced by a quadratic on ``[b - w, b + w]``.

    Continuously differentiable and convex; equal to the exact cost outside
    the bands and above it by at most ``jump * w / 4`` inside.  Used only as a
    continuation device during local descent.
    """

    width: float = 0.0

    def _bands(self, e):
        z = e[..., None] - self.breakpoints
        jumps = np.diff(self.marginal_rates)
        inside = np.abs(z) < self.width
        return z, jumps, inside

    def __call__(self, energy):
        e = np.asarray(energy, dtype=float)
        z, jumps, inside = self._bands(e)
        h = self.width
        extra = np.where(inside, (z + h) ** 2 / (4 * h) - np.maximum(z, 0.0), 0.0)
        return super().__call__(e) + np.sum(jumps * extra, axis=-1)

    def marginal(self, energy):
        e = np.asarray(energy, dtype=float)
        z, jumps, inside = self._bands(e)
        extra = np.where(inside, (z + self.width) / (2 * self.width) - (z >= 0), 0.0)
        return super().marginal(e) + np.sum(jumps * extra, axis=-1)


@dataclass(frozen=True, eq=False)
class DiscomfortModel:
    """Correlated discomfort ``d_{j->i} = beta_j * |i-j|**t_j`` with ``beta_j ~ F_j``.

    Families (``s`` is the dollar ``scale``):

    * ``uniform``: beta_j uniform on ``[0, s]``.
    * ``exponential``: ``F_j(x) = 1 - exp(-mu_j * x / s)``; larger mu means less discomfort.
    * ``tabulated``: monotone linear interpolation through ``(knots_x, knots_F)``.

    ``mu`` and ``exponent`` hold one value per origin slot.
    """

    family: str
    mu: np.ndarray
    exponent: np.ndarray
    scale: float
    knots_x: np.ndarray | None = None
    knots_F: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ScenarioError("family", f"unknown discomfort family {self.family!r}")
        mu = _frozen(np.atleast_1d(self.mu))
        t = _frozen(np.atleast_1d(self.exponent))
        if mu.shape != t.shape:
            raise ScenarioError("exponent", "mu and exponent must have one entry per slot")
        if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
            raise ScenarioError("mu", "mu must be positive")
        if np.any(~np.isfinite(t)) or np.any(t < 0):
            raise ScenarioError("exponent", "exponent must be nonnegative")
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ScenarioError("scale", "scale must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "exponent", t)
        object.__setattr__(self, "scale", float(self.scale))
        if self.family == "tabulated":
            if self.knots_x is None or self.knots_F is None:
                raise ScenarioError("knots", "tabulated family needs knots_x and knots_F")
            kx, kf = _frozen(self.knots_x), _frozen(self.knots_F)
            if kx.shape != kf.shape or kx.size < 2:
                raise ScenarioError("knots", "knots_x and knots_F must have equal length >= 2")
            if kx[0] != 0 or kf[0] != 0 or np.any(np.diff(kx) <= 0):
                raise ScenarioError("knots", "knots must start at (0, 0) with increasing x")
            slopes = np.diff(kf) / np.diff(kx)
            if np.any(slopes < 0) or np.any(np.diff(slopes) > 1e-12) or abs(kf[-1] - 1) > 1e-12:
                raise ScenarioError("knots", "tabulated CDF must be nondecreasing, concave and end at 1")
            object.__setattr__(self, "knots_x", kx)
            object.__setattr__(self, "knots_F", kf)
            object.__setattr__(self, "_knot_slopes", _frozen(slopes))

    @classmethod
    def uniform(cls, n_slots, scale, exponent=0.0):
        return cls("uniform", np.ones(n_slots), np.full(n_slots, exponent, dtype=float), scale)

    @classmethod
    def exponential(cls, n_slots, mu, scale, exponent=1.0):
        return cls("exponential", np.broadcast_to(np.asarray(mu, float), (n_slots,)),
                   np.broadcast_to(np.asarray(exponent, float), (n_slots,)), scale)

    @property
    def n_slots(self) -> int:
        return self.mu.size

    def with_mu(self, mu) -> DiscomfortModel:
        return DiscomfortModel(self.family, np.broadcast_to(np.asarray(mu, float), self.mu.shape),
                               self.exponent, self.scale, self.knots_x, self.knots_F)

    def distance_factors(self) -> np.ndarray:
        """``C[j, i] = |i - j| ** t_j`` with a zero diagonal (staying costs nothing)."""
        n = self.n_slots
        dist = np.abs(np.arange(n)[None, :] - np.arange(n)[:, None]).astype(float)
        with np.errstate(divide="ignore"):
            c = dist ** self.exponent[:, None]
        np.fill_diagonal(c, 0.0)
        return c

    def cdf(self, x, origins=None):
        """``F_j(x)``; ``origins`` (slot indices) broadcasts against ``x``.

        With ``origins=None`` the second-to-last axis of ``x`` indexes the origin slot.
        """
        x = np.asarray(x, dtype=float)
        mu = self._mu_for(x, origins)
        if self.family == "exponential":
            return -np.expm1(-mu * np.maximum(x, 0.0) / self.scale)
        if self.family == "uniform":
            return np.clip(x / self.scale, 0.0, 1.0)
        return np.interp(x, self.knots_x, self.knots_F, left=0.0, right=1.0)

    def pdf(self, x, origins=None):
        """Right derivative of ``F_j`` at ``x``."""
        x = np.asarray(x, dtype=float)
        mu = self._mu_for(x, origins)
        if self.family == "exponential":
            return np.where(x >= 0, mu / self.scale * np.exp(-mu * np.maximum(x, 0.0) / self.scale), 0.0)
        if self.family == "uniform":
            return np.where((x >= 0) & (x < self.scale), 1.0 / self.scale, 0.0)
        seg = np.searchsorted(self.knots_x, x, side="right") - 1
        inside = (seg >= 0) & (seg < self._knot_slopes.size)
        return np.where(inside, self._knot_slopes[np.clip(seg, 0, self._knot_slopes.size - 1)], 0.0)

    def quantile(self, u) -> np.ndarray:
        """Inverse CDF per origin slot; the last axis of ``u`` indexes the slot."""
        u = np.asarray(u, dtype=float)
        if self.family == "exponential":
            return -np.log1p(-u) * self.scale / self.mu
        if self.family == "uniform":
            return u * self.scale
        return np.interp(u, self.knots_F, self.knots_x)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        """Draw beta values with shape ``(*size, n_slots)`` by inverse-CDF sampling."""
        shape = tuple(np.atleast_1d(size)) + (self.n_slots,)
        return self.quantile(rng.random(shape))

    def _mu_for(self, x, origins):
        if self.family != "exponential":
            return None
        if origins is None:
            if x.ndim < 2:
                raise ValueError("origins required for 0-d/1-d input")
            return self.mu.reshape((-1, 1))
        return self.mu[np.asarray(origins)]


CostSpec = Union[PiecewiseLinearCost, Sequence[PiecewiseLinearCost]]


@dataclass(frozen=True, eq=False)
class Scenario:
    n_slots: int
    baseline: np.ndarray
    flat_rate: float
    cost: CostSpec
    discomfort: DiscomfortModel
    base_fractions: np.ndarray
    comment: str = ""

    def __post_init__(self):
        object.__setattr__(self, "baseline", _frozen(self.baseline))
        object.__setattr__(self, "base_fractions", _frozen(self.base_fractions))
        if not isinstance(self.cost, PiecewiseLinearCost):
            object.__setattr__(self, "cost", tuple(self.cost))

    @property
    def costs(self) -> tuple[PiecewiseLinearCost, ...]:
        if isinstance(self.cost, PiecewiseLinearCost):
            return (self.cost,) * self.n_slots
        return self.cost

    def production_cost(self, final) -> float:
        final = np.asarray(final, dtype=float)
        if isinstance(self.cost, PiecewiseLinearCost):
            return float(np.sum(self.cost(final)))
        return float(sum(c(e) for c, e in zip(self.cost, final)))

    def marginal_costs(self, final) -> np.ndarray:
        final = np.asarray(final, dtype=float)
        if isinstance(self.cost, PiecewiseLinearCost):
            return self.cost.marginal(final)
        return np.array([c.marginal(e) for c, e in zip(self.cost, final)])

    @property
    def baseline_cost(self) -> float:
        return self.production_cost(self.baseline)

    def with_mu(self, mu) -> Scenario:
        return Scenario(self.n_slots, self.baseline, self.flat_rate, self.cost,
                        self.discomfort.with_mu(mu), self.base_fractions, self.comment)

    def with_cost_smoothing(self, width: float) -> Scenario:
        """Same scenario with production-cost kinks rounded over ``+/- width`` MWh."""
        if width <= 0:
            return self
        if isinstance(self.cost, PiecewiseLinearCost):
            cost = self.cost.smoothed(width)
        else:
            cost = tuple(c.smoothed(width) for c in self.cost)
        return Scenario(self.n_slots, self.baseline, self.flat_rate, cost, self.discomfort,
                        self.base_fractions, self.comment)


# ---------------------------------------------------------------- plans


def _check_box(name, values, flat_rate):
    if np.any(~np.isfinite(values)):
        raise ValueError(f"{name} must be finite")
    if np.any(values < 0) or np.any(values > flat_rate):
        raise ValueError(f"{name} must lie in [0, flat_rate={flat_rate}]")


@dataclass(frozen=True, eq=False)
class BasePlan:
    R: np.ndarray
    mechanism = "base"

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R))

    def check(self, scenario: Scenario):
        if self.R.shape != (scenario.n_slots,):
            raise ValueError("R must have one entry per slot")
        _check_box("R", self.R, scenario.flat_rate)


@dataclass(frozen=True, eq=False)
class OptimizedPlan:
    R: np.ndarray
    q: np.ndarray
    mechanism = "optimized"

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R))
        object.__setattr__(self, "q", _frozen(self.q))

    def check(self, scenario: Scenario):
        n = scenario.n_slots
        if self.R.shape != (n, n) or self.q.shape != (n, n):
            raise ValueError("R and q must be n_slots x n_slots")
        _check_box("R", self.R, scenario.flat_rate)
        if np.any(self.q < 0) or np.any(self.q > 1):
            raise ValueError("q must lie in [0, 1]")
        rows = self.q.sum(axis=1)
        bad = np.flatnonzero(rows > 1 + 1e-12)
        if bad.size:
            raise ValueError(f"q row {bad[0]} sums to {rows[bad[0]]:.6g} > 1")


@dataclass(frozen=True, eq=False)
class RobustPlan:
    R: np.ndarray
    q: np.ndarray
    mechanism = "robust"

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R))
        object.__setattr__(self, "q", _frozen(self.q))

    def check(self, scenario: Scenario):
        n = scenario.n_slots
        if self.R.shape != (n,) or self.q.shape != (n,):
            raise ValueError("R and q must have one entry per slot")
        _check_box("R", self.R, scenario.flat_rate)
        if np.any(self.q < 0) or np.any(self.q > 1):
            raise ValueError("q must lie in [0, 1]")
        if self.q.sum() > 1 + 1e-12:
            raise ValueError(f"q sums to {self.q.sum():.6g} > 1")


@dataclass(frozen=True, eq=False)
class BroadcastPlan:
    R: np.ndarray
    mechanism = "broadcast"

    def __post_init__(self):
        object.__setattr__(self, "R", _frozen(self.R))

    def check(self, scenario: Scenario):
        if self.R.shape != (scenario.n_slots,):
            raise ValueError("R must have one entry per slot")
        _check_box("R", self.R, scenario.flat_rate)


OfferPlan = Union[BasePlan, OptimizedPlan, RobustPlan, BroadcastPlan]


# ---------------------------------------------------------------- results


@dataclass(frozen=True, eq=False)
class ShiftMatrix:
    """``entries[j, i]`` is the demand moved from slot j to slot i (diagonal: retained)."""

    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", _frozen(self.entries))

    @property
    def final(self) -> np.ndarray:
        return self.entries.sum(axis=0)

    @property
    def origin(self) -> np.ndarray:
        return self.entries.sum(axis=1)


@dataclass(frozen=True)
class CostBreakdown:
    production: float
    discounts_paid: float
    wasted_discounts: float
    baseline_total: float

    @property
    def total(self) -> float:
        return self.production + self.discounts_paid

    @property
    def savings(self) -> float:
        return self.baseline_total - self.total

    @property
    def savings_fraction(self) -> float:
        return 1.0 - self.total / self.baseline_total


@dataclass(frozen=True)
class StartRecord:
    index: int
    objective: float
    iterations: int
    kind: str = "random"
    status: str = "ok"


@dataclass(frozen=True, eq=False)
class OptimizationResult:
    mechanism: str
    best_plan: OfferPlan
    best_breakdown: CostBreakdown
    starts: int
    per_start: list[StartRecord]
    seed: int
    wall_time: float = field(default=0.0, compare=False)

    @property
    def best_objective(self) -> float:
        return self.best_breakdown.total


# ---------------------------------------------------------------- validation


def _number(raw: Mapping[str, Any], key: str, where: str = ""):
    if key not in raw:
        raise ScenarioError(key, f"missing field {where}{key!r}")
    try:
        return float(raw[key])
    except (TypeError, ValueError):
        raise ScenarioError(key, f"field {where}{key!r} is not a number: {raw[key]!r}") from None


def _vector(raw, key, where=""):
    if key not in raw:
        raise ScenarioError(key, f"missing field {where}{key!r}")
    try:
        return np.array(raw[key], dtype=float).ravel()
    except (TypeError, ValueError):
        raise ScenarioError(key, f"field {where}{key!r} must be a list of numbers") from None


def _per_slot(value, n, key):
    try:
        arr = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(key, f"field {key!r} must be a number or a list of numbers") from None
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ScenarioError(key, f"field {key!r} needs {n} entries, got {arr.size}")
    return arr


def _build_cost(raw, where):
    if not isinstance(raw, Mapping):
        raise ScenarioError("cost", "cost must be an object")
    bp = _vector(raw, "breakpoints_mwh", where) if raw.get("breakpoints_mwh") else np.zeros(0)
    rates = _vector(raw, "marginal_rates", where)
    return PiecewiseLinearCost(bp, rates)


def validate_scenario(raw: Mapping[str, Any]) -> Scenario:
    """Build a :class:`Scenario` from the JSON-style mapping used by scenario files.

    Raises :class:`ScenarioError` naming the offending field.
    """
    from drmech.mechanisms import default_base_fractions

    if "n_slots" not in raw:
        raise ScenarioError("n_slots", "missing field 'n_slots'")
    n_val = raw["n_slots"]
    if isinstance(n_val, bool) or not isinstance(n_val, (int, float)) or int(n_val) != n_val:
        raise ScenarioError("n_slots", f"n_slots must be an integer, got {n_val!r}")
    n = int(n_val)
    if n < 2:
        raise ScenarioError("n_slots", "n_slots must be at least 2")

    baseline = _vector(raw, "baseline_mwh")
    if baseline.size != n:
        raise ScenarioError("baseline_mwh", f"baseline_mwh needs {n} entries, got {baseline.size}")
    if np.any(~np.isfinite(baseline)):
        raise ScenarioError("baseline_mwh", "baseline must be finite")
    if np.any(baseline < 0):
        raise ScenarioError("baseline_mwh", "baseline must be nonnegative")

    flat_rate = _number(raw, "flat_rate")
    if not (np.isfinite(flat_rate) and flat_rate > 0):
        raise ScenarioError("flat_rate", "flat_rate must be positive")

    if "cost" not in raw:
        raise ScenarioError("cost", "missing field 'cost'")
    cost_raw = raw["cost"]
    if isinstance(cost_raw, list):
        if len(cost_raw) != n:
            raise ScenarioError("cost", f"per-slot cost list needs {n} entries")
        cost = tuple(_build_cost(c, "cost.") for c in cost_raw)
    else:
        cost = _build_cost(cost_raw, "cost.")

    if "discomfort" not in raw:
        raise ScenarioError("discomfort", "missing field 'discomfort'")
    d = raw["discomfort"]
    if not isinstance(d, Mapping):
        raise ScenarioError("discomfort", "discomfort must be an object")
    family = d.get("family", "exponential")
    if family not in FAMILIES:
        raise ScenarioError("family", f"unknown discomfort family {family!r}")
    scale = float(d["scale"]) if d.get("scale") is not None else flat_rate
    if family == "exponential":
        if "mu" not in d:
            raise ScenarioError("mu", "missing field 'discomfort.mu'")
        mu = _per_slot(d["mu"], n, "mu")
        if np.any(~np.isfinite(mu)) or np.any(mu <= 0):
            raise ScenarioError("mu", "mu must be positive")
    else:
        mu = np.ones(n)
    default_t = 1.0 if family == "exponential" else 0.0
    exponent = _per_slot(d.get("exponent", default_t), n, "exponent")
    discomfort = DiscomfortModel(family, mu, exponent, scale, d.get("knots_x"), d.get("knots_F"))

    if raw.get("base_fractions") is not None:
        q = np.array(raw["base_fractions"], dtype=float)
        if q.shape != (n, n):
            raise ScenarioError("base_fractions", f"base_fractions must be {n}x{n}")
        if np.any(q < 0) or np.any(q.sum(axis=1) > 1 + 1e-12):
            raise ScenarioError("base_fractions", "base_fractions rows must be nonnegative and sum to at most 1")
    else:
        q = default_base_fractions(n)

    return Scenario(n, baseline, flat_rate, cost, discomfort, q, str(raw.get("comment", "")))
