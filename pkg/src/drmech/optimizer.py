"""Multi-start projected-gradient descent over each mechanism's feasible set.

Internally every problem works in normalised coordinates: discounts divided by
the flat rate B and costs divided by the baseline production cost, so step
sizes and tolerances are scale free.
"""
from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from drmech import mechanisms as mech
from drmech.model import (BasePlan, BroadcastPlan, OptimizationResult, OptimizedPlan, RobustPlan, Scenario,
                          StartRecord)


class DescentError(RuntimeError):
    """A local descent produced a non-finite objective."""


class OptimizationError(RuntimeError):
    def __init__(self, message, per_start):
        super().__init__(message)
        self.per_start = per_start


@dataclass(frozen=True)
class OptimizerOptions:
    starts: int = 100
    # per start, split evenly across the continuation stages
    max_iters: int = 2000
    # central-difference step, in normalised discount units
    fd_step: float = 1e-5
    # projected-gradient norm in normalised units
    grad_tol: float = 1e-6
    rel_tol: float = 1e-10
    step0: float = 1.0
    # largest coordinate change of a trial step, in normalised units (inf disables the cap)
    max_move: float = 5.0
    shrink: float = 0.5
    armijo: float = 1e-4
    # broadcast smoothing temperatures, as fractions of the flat rate; an exact
    # (unsmoothed) stage follows the last one
    smoothing: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    # production-cost kink rounding widths, as fractions of the mean baseline; an
    # exact stage always follows for the mechanisms whose objective is continuous
    kink_smoothing: tuple[float, ...] = (1e-2, 1e-3)
    # "analytic" or "fd" (central differences, batched for broadcast)
    gradient: str = "analytic"
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if self.gradient not in ("analytic", "fd"):
            raise ValueError("gradient must be 'analytic' or 'fd'")
        if self.starts < 0 or self.max_iters < 1:
            raise ValueError("starts must be >= 0 and max_iters >= 1")
        for name in ("fd_step", "grad_tol", "rel_tol", "step0", "armijo", "max_move"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")
        if not self.smoothing or any(e <= 0 for e in self.smoothing):
            raise ValueError("smoothing temperatures must be positive")
        if any(w < 0 for w in self.kink_smoothing):
            raise ValueError("kink smoothing widths must be nonnegative")


def worker_count(options: OptimizerOptions | None = None) -> int:
    if options is not None and options.threads:
        return max(1, int(options.threads))
    env = os.environ.get("DRMECH_THREADS")
    if env:
        return max(1, int(env))
    return 1


# ---------------------------------------------------------------- projections


def project_box(x, lo, hi):
    """Euclidean projection onto ``[lo, hi]`` (entrywise clamp)."""
    if np.any(np.asarray(lo) > np.asarray(hi)):
        raise ValueError("lo must not exceed hi")
    return np.clip(x, lo, hi)


def _project_simplex_rows(v, cap):
    # sort-based projection onto {x >= 0, sum x = cap}, row-wise
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - cap
    k = np.arange(1, v.shape[-1] + 1)
    cond = u - css / k > 0
    rho = v.shape[-1] - 1 - np.argmax(cond[..., ::-1], axis=-1)
    theta = np.take_along_axis(css, rho[..., None], axis=-1) / (rho[..., None] + 1)
    return np.maximum(v - theta, 0.0)


def project_capped_simplex(v, cap: float = 1.0):
    """Projection onto ``{0 <= q <= 1, sum(q) <= cap}`` along the last axis (``0 < cap <= 1``).

    If clipping to the unit box already satisfies the sum constraint that is the
    answer; otherwise the sum constraint is active and the upper bounds are not
    (each entry is at most the sum), so a plain simplex projection applies.
    """
    if not 0 < cap <= 1:
        raise ValueError("cap must lie in (0, 1]")
    v = np.asarray(v, dtype=float)
    clipped = np.clip(v, 0.0, 1.0)
    over = clipped.sum(axis=-1) > cap
    if not np.any(over):
        return clipped
    out = clipped.copy()
    out[over] = _project_simplex_rows(v[over], cap)
    return out


# ---------------------------------------------------------------- local descent


def finite_difference_gradient(objective, x, h):
    g = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (objective(x + e) - objective(x - e)) / (2 * h)
    return g


def local_descent(objective: Callable, x0, project: Callable, options: OptimizerOptions = OptimizerOptions(),
                  gradient: Callable | None = None):
    """Projected-gradient descent with Armijo backtracking along the projection arc.

    The first trial step is ``options.step0``; later trials use the
    Barzilai-Borwein step from the last two iterates.  Trial steps are capped
    so that no coordinate moves by more than ``options.max_move``.  Every iterate is feasible
    and the objective never increases.  Returns ``(x, f, iterations)``.
    """
    if gradient is None:
        def gradient(z):
            return finite_difference_gradient(objective, z, options.fd_step)

    x = project(np.asarray(x0, dtype=float))
    f = objective(x)
    if not np.isfinite(f):
        raise DescentError("objective is not finite at the starting point")
    g = gradient(x)
    trial = options.step0
    it = 0
    while it < options.max_iters:
        it += 1
        if np.linalg.norm(x - project(x - g)) <= options.grad_tol:
            break
        gmax = float(np.max(np.abs(g)))
        step = min(trial, options.max_move / gmax) if gmax > 0 else trial
        while True:
            xn = project(x - step * g)
            fn = objective(xn)
            if not np.isfinite(fn):
                raise DescentError(f"objective became non-finite at iteration {it}")
            if fn <= f + options.armijo * np.dot(g.ravel(), (xn - x).ravel()):
                break
            step *= options.shrink
            if step < 1e-16:
                return x, f, it
        decrease = f - fn
        s = xn - x
        x, f = xn, fn
        if decrease <= options.rel_tol * abs(f):
            break
        gn = gradient(x)
        y = gn - g
        sy = float(np.dot(s.ravel(), y.ravel()))
        trial = float(np.dot(s.ravel(), s.ravel())) / sy if sy > 0 else options.step0
        trial = min(max(trial, 1e-10), 1e10)
        g = gn
    return x, f, it


# ---------------------------------------------------------------- problems


def _sample_capped_simplex(rng, shape):
    """Uniform on ``{q >= 0, sum q <= 1}`` along the last axis (normalised exponential spacings)."""
    e = rng.exponential(size=shape[:-1] + (shape[-1] + 1,))
    return (e / e.sum(axis=-1, keepdims=True))[..., :-1]


class Problem:
    """A mechanism's optimisation problem in normalised coordinates.

    Discounts are measured in units of the flat rate (box ``[0, 1]``) and costs
    in units of the baseline production cost.
    """

    mechanism = ""

    def __init__(self, scenario: Scenario, C0: float | None = None):
        self.scenario = scenario
        self.B = scenario.flat_rate
        self.D = self.B
        self.ub = 1.0
        self.C0 = scenario.baseline_cost if C0 is None else C0
        self.n = scenario.n_slots

    def stage(self, eps: float = 0.0, width: float = 0.0) -> Problem:
        """The same problem on a cost curve with kinks rounded over ``width`` MWh (same scaling)."""
        return type(self)(self.scenario.with_cost_smoothing(width), C0=self.C0)

    def objective(self, x) -> float:
        raise NotImplementedError

    def gradient(self, x):
        raise NotImplementedError

    def project(self, x):
        raise NotImplementedError

    def sample(self, rng):
        raise NotImplementedError

    def to_plan(self, x):
        raise NotImplementedError

    def from_plan(self, plan):
        raise NotImplementedError

    def zero(self):
        raise NotImplementedError

    def exact_objective(self, x) -> float:
        return self.objective(x)

    def _clip_r(self, x):
        return np.clip(x, 0.0, self.ub)


class BaseProblem(Problem):
    mechanism = "base"

    def __init__(self, scenario, C0=None):
        super().__init__(scenario, C0)
        self.size = self.n

    def objective(self, x):
        return mech.base_objective(self.scenario, self.D * x) / self.C0

    def gradient(self, x):
        _, g = mech.base_objective(self.scenario, self.D * x, gradient=True)
        return g * self.D / self.C0

    def project(self, x):
        return self._clip_r(x)

    def sample(self, rng):
        return self.ub * rng.random(self.n)

    def to_plan(self, x):
        return BasePlan(np.minimum(self.D * self._clip_r(x), self.B))

    def from_plan(self, plan):
        return np.asarray(plan.R, float) / self.D

    def zero(self):
        return np.zeros(self.n)


class OptimizedProblem(Problem):
    """Variables: off-diagonal discounts then off-diagonal fractions, row-major."""

    mechanism = "optimized"

    def __init__(self, scenario, C0=None):
        super().__init__(scenario, C0)
        self.mask = ~np.eye(self.n, dtype=bool)
        self.m = self.n * (self.n - 1)
        self.size = 2 * self.m

    def _unpack(self, x):
        R = np.zeros((self.n, self.n))
        q = np.zeros((self.n, self.n))
        R[self.mask] = self.D * x[: self.m]
        q[self.mask] = x[self.m:]
        return R, q

    def objective(self, x):
        R, q = self._unpack(x)
        return mech.optimized_objective(self.scenario, R, q) / self.C0

    def gradient(self, x):
        R, q = self._unpack(x)
        _, gR, gq = mech.optimized_objective(self.scenario, R, q, gradient=True)
        return np.concatenate((gR[self.mask] * self.D, gq[self.mask])) / self.C0

    def project(self, x):
        r = self._clip_r(x[: self.m])
        q = project_capped_simplex(x[self.m:].reshape(self.n, self.n - 1)).ravel()
        return np.concatenate((r, q))

    def sample(self, rng):
        r = self.ub * rng.random(self.m)
        q = _sample_capped_simplex(rng, (self.n, self.n - 1)).ravel()
        return np.concatenate((r, q))

    def to_plan(self, x):
        R, q = self._unpack(self.project(x))
        return OptimizedPlan(np.minimum(R, self.B), q)

    def from_plan(self, plan):
        return np.concatenate((np.asarray(plan.R)[self.mask] / self.D, np.asarray(plan.q)[self.mask]))

    def zero(self):
        # zero discounts with the base fractions: a stationary point equal to the baseline
        return np.concatenate((np.zeros(self.m), self.scenario.base_fractions[self.mask]))


class RobustProblem(Problem):
    mechanism = "robust"

    def __init__(self, scenario, C0=None):
        super().__init__(scenario, C0)
        self.size = 2 * self.n

    def objective(self, x):
        return mech.robust_objective(self.scenario, self.D * x[: self.n], x[self.n:]) / self.C0

    def gradient(self, x):
        _, gR, gq = mech.robust_objective(self.scenario, self.D * x[: self.n], x[self.n:], gradient=True)
        return np.concatenate((gR * self.D, gq)) / self.C0

    def project(self, x):
        return np.concatenate((self._clip_r(x[: self.n]), project_capped_simplex(x[self.n:])))

    def sample(self, rng):
        return np.concatenate((self.ub * rng.random(self.n), _sample_capped_simplex(rng, (self.n,))))

    def to_plan(self, x):
        x = self.project(x)
        return RobustPlan(np.minimum(self.D * x[: self.n], self.B), x[self.n:])

    def from_plan(self, plan):
        return np.concatenate((np.asarray(plan.R) / self.D, np.asarray(plan.q)))

    def zero(self):
        return np.concatenate((np.zeros(self.n), np.full(self.n, 1.0 / self.n)))


class BroadcastProblem(Problem):
    """Descends on the softmax-smoothed cost; ``eps`` (a fraction of the flat rate) is set per stage."""

    mechanism = "broadcast"

    def __init__(self, scenario, eps=0.0, C0=None):
        super().__init__(scenario, C0)
        self.size = self.n
        self.eps = eps

    def stage(self, eps=0.0, width=0.0):
        return BroadcastProblem(self.scenario.with_cost_smoothing(width), eps, C0=self.C0)

    def objective(self, x):
        return float(mech.broadcast_objective(self.scenario, self.D * x, self.eps * self.B)) / self.C0

    def gradient(self, x):
        _, g = mech.broadcast_objective(self.scenario, self.D * x, self.eps * self.B, gradient=True)
        return g * self.D / self.C0

    def fd_gradient(self, x, h):
        # all 2N central-difference points in one batched evaluation
        shifts = np.concatenate((np.eye(self.n), -np.eye(self.n))) * h
        vals = mech.broadcast_objective(self.scenario, self.D * (x[None, :] + shifts), self.eps * self.B)
        return (vals[: self.n] - vals[self.n:]) / (2 * h) / self.C0

    def exact_objective(self, x):
        return float(mech.broadcast_objective(self.scenario, self.D * x, 0.0)) / self.C0

    def project(self, x):
        return self._clip_r(x)

    def sample(self, rng):
        return self.ub * rng.random(self.n)

    def to_plan(self, x):
        return BroadcastPlan(np.minimum(self.D * self._clip_r(x), self.B))

    def from_plan(self, plan):
        return np.asarray(plan.R, float) / self.D

    def zero(self):
        return np.zeros(self.n)


PROBLEMS = {"base": BaseProblem, "optimized": OptimizedProblem, "robust": RobustProblem,
            "broadcast": BroadcastProblem}


def make_problem(mechanism: str, scenario: Scenario) -> Problem:
    if mechanism not in PROBLEMS:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    return PROBLEMS[mechanism](scenario)


# ---------------------------------------------------------------- embeddings


def embed_base(scenario: Scenario, plan: BasePlan) -> OptimizedPlan:
    """The optimized plan that reproduces a base plan exactly."""
    n = scenario.n_slots
    return OptimizedPlan(np.broadcast_to(np.asarray(plan.R), (n, n)), scenario.base_fractions)


def embed_robust(scenario: Scenario, plan: RobustPlan) -> OptimizedPlan:
    """Optimized plan offering ``R_i`` to fraction ``q_i`` of every other slot's users.

    Costs exactly the robust plan's cost minus its wasted discounts.
    """
    n = scenario.n_slots
    q = np.broadcast_to(np.asarray(plan.q), (n, n)).copy()
    np.fill_diagonal(q, 0.0)
    return OptimizedPlan(np.broadcast_to(np.asarray(plan.R), (n, n)), q)


def rescale_discounts(plan, factor: float):
    """Same plan with every discount multiplied by ``factor``.

    Moving from flexibility mu to mu' with exponential discomfort, factor mu/mu'
    reproduces the same acceptance probabilities.
    """
    if isinstance(plan, (OptimizedPlan, RobustPlan)):
        return type(plan)(np.asarray(plan.R) * factor, plan.q)
    return type(plan)(np.asarray(plan.R) * factor)


# ---------------------------------------------------------------- multi-start


def _gradient_for(problem, options):
    if options.gradient == "analytic":
        return problem.gradient
    if isinstance(problem, BroadcastProblem):
        return lambda x: problem.fd_gradient(x, options.fd_step)
    return None


def _stages(problem, options):
    """``(eps, width)`` pairs: continuation from smoothed towards exact objectives."""
    mean_load = float(np.mean(problem.scenario.baseline))
    kinks = [w * mean_load for w in options.kink_smoothing]
    if isinstance(problem, BroadcastProblem):
        eps = options.smoothing
        count = max(len(eps), len(kinks))
        stages = [(eps[min(k, len(eps) - 1)], kinks[k] if k < len(kinks) else 0.0) for k in range(count)]
    else:
        stages = [(0.0, w) for w in kinks]
    return stages + [(0.0, 0.0)]


def _run_start(problem: Problem, x0, options: OptimizerOptions):
    """Descend through the continuation stages; return the best exact point seen, starting point included."""
    x = problem.project(np.asarray(x0, dtype=float))
    best_x, best_f = x, problem.exact_objective(x)
    if not np.isfinite(best_f):
        raise DescentError("objective is not finite at the starting point")
    iters = 0
    stages = _stages(problem, options)
    per_stage = replace(options, max_iters=max(1, options.max_iters // len(stages)))
    for eps, width in stages:
        stage = problem.stage(eps, width)
        x, _, k = local_descent(stage.objective, x, stage.project, per_stage, _gradient_for(stage, options))
        iters += k
        f = problem.exact_objective(x)
        if f < best_f:
            best_x, best_f = x, f
    return best_x, best_f, iters


def multi_start_minimize(mechanism: str, scenario: Scenario, options: OptimizerOptions = OptimizerOptions(),
                         extra_starts: Sequence = ()) -> OptimizationResult:
    """Best local minimum over random and augmented starting points.

    Random start k draws from a generator seeded with ``(seed, k)``, so results
    do not depend on execution order or worker count.  The zero-discount plan
    and any ``extra_starts`` plans (e.g. embedded optima of simpler mechanisms)
    are appended as further starts.  Broadcast starts descend through the
    smoothing schedule and are ranked by their exact (unsmoothed) cost.
    """
    t0 = time.perf_counter()
    problem = make_problem(mechanism, scenario)
    starts = []
    for k in range(options.starts):
        rng = np.random.default_rng([options.seed, k])
        starts.append(("random", problem.project(problem.sample(rng))))
    starts.append(("zero", problem.zero()))
    for plan in extra_starts:
        starts.append(("augmented", problem.project(problem.from_plan(plan))))

    def work(item):
        index, (kind, x0) = item
        try:
            x, f, iters = _run_start(problem, x0, options)
        except DescentError as exc:
            return StartRecord(index, float("nan"), 0, kind, f"aborted: {exc}"), None
        return StartRecord(index, float(f) * problem.C0, iters, kind), x

    items = list(enumerate(starts))
    threads = worker_count(options)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(work, items))
    else:
        outcomes = [work(item) for item in items]

    records = [rec for rec, _ in outcomes]
    done = [(rec, x) for rec, x in outcomes if x is not None]
    if not done:
        raise OptimizationError(f"all {len(records)} starts aborted for {mechanism}", records)
    best_rec, best_x = min(done, key=lambda item: (item[0].objective, item[0].index))
    plan = problem.to_plan(best_x)
    _, breakdown = mech.evaluate(scenario, plan)
    return OptimizationResult(mechanism, plan, breakdown, len(records), records, options.seed,
                              time.perf_counter() - t0)


def optimize_all(scenario: Scenario, mechanisms: Sequence[str], options: OptimizerOptions = OptimizerOptions(),
                 warm: dict | None = None) -> dict[str, OptimizationResult]:
    """Optimise several mechanisms on one scenario with cross-mechanism start augmentation.

    Base and robust run first.  Their optima are embedded as extra starts of the
    optimized mechanism, which makes its reported cost no larger than either.
    Broadcast starts from the robust optimum's population-averaged discount
    ``R_i * q_i``.  ``warm`` maps mechanism names to additional starting plans.
    """
    warm = warm or {}
    order = sorted(mechanisms, key=lambda m: ["base", "robust", "broadcast", "optimized"].index(m))
    results: dict[str, OptimizationResult] = {}
    for name in order:
        extra = list(warm.get(name, ()))
        if name == "optimized":
            if "base" in results:
                extra.append(embed_base(scenario, results["base"].best_plan))
            if "robust" in results:
                extra.append(embed_robust(scenario, results["robust"].best_plan))
        if name == "broadcast" and "robust" in results:
            rob = results["robust"].best_plan
            extra.append(BroadcastPlan(np.asarray(rob.R) * np.asarray(rob.q)))
        results[name] = multi_start_minimize(name, scenario, options, extra)
    return {name: results[name] for name in mechanisms}


def mu_sweep(scenario: Scenario, mechanisms: Sequence[str], options: OptimizerOptions = OptimizerOptions(),
             mu_values: Sequence[float] | None = None):
    """Optimise at each flexibility value in ascending order, warm-starting from the previous optimum.

    Yields ``(scenario_at_mu, results, error)`` per value, where ``error`` is the
    :class:`OptimizationError` that stopped that value (``results`` is then
    empty).  The previous optimum's discounts are rescaled by ``mu_prev / mu``,
    which keeps every exponential acceptance probability unchanged, so each
    value starts from a plan at least as good as the one found before.
    """
    mus = sorted(mu_values) if mu_values is not None else [None]
    previous: dict[str, tuple[float, object]] = {}
    for mu in mus:
        sc = scenario if mu is None else scenario.with_mu(mu)
        mu_now = float(np.mean(sc.discomfort.mu))
        warm = {name: [rescale_discounts(plan, mu_prev / mu_now)] for name, (mu_prev, plan) in previous.items()}
        try:
            results = optimize_all(sc, mechanisms, options, warm) if mechanisms else {}
        except OptimizationError as exc:
            yield sc, {}, exc
            continue
        for name, res in results.items():
            previous[name] = (mu_now, res.best_plan)
        yield sc, results, None
