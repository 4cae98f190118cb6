import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from drmech.mechanisms import evaluate
from drmech.model import BasePlan, BroadcastPlan, OptimizedPlan, RobustPlan
from drmech.optimizer import (DescentError, OptimizationError, OptimizerOptions, embed_base,
                              embed_robust, local_descent, make_problem, multi_start_minimize, optimize_all,
                              project_box, project_capped_simplex, rescale_discounts, worker_count)
from helpers import MECHANISMS, TOY2, random_scenario, toy_scenario
from oracles import base_grid

seeds = st.integers(0, 2**32 - 1)
QUICK = OptimizerOptions(starts=3, max_iters=600)


# ---------------------------------------------------------------- projections


def test_project_box_examples():
    np.testing.assert_array_equal(project_box(np.array([-5.0, 60.0, 200.0]), 0.0, 110.0), [0.0, 60.0, 110.0])
    x = np.array([1.0, 50.0, 110.0])
    np.testing.assert_array_equal(project_box(x, 0.0, 110.0), x)
    with pytest.raises(ValueError):
        project_box(x, 1.0, 0.0)


@given(seeds)
def test_project_box_is_nearest_point(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(50, 100, 5)
    p = project_box(x, 0.0, 110.0)
    assert np.all((p >= 0) & (p <= 110))
    ys = rng.uniform(0, 110, (200, 5))
    assert np.all(np.linalg.norm(x - ys, axis=1) >= np.linalg.norm(x - p) - 1e-12)
    np.testing.assert_array_equal(project_box(p, 0.0, 110.0), p)


def test_project_capped_simplex_examples():
    np.testing.assert_allclose(project_capped_simplex([0.2, 0.3]), [0.2, 0.3])
    np.testing.assert_allclose(project_capped_simplex([0.8, 0.8]), [0.5, 0.5])
    np.testing.assert_allclose(project_capped_simplex([1.5, -0.2]), [1.0, 0.0])


@pytest.mark.parametrize("v", [(0.8, 0.8), (1.5, -0.2), (0.9, 0.4), (-0.3, 2.0), (0.1, 0.2)])
def test_project_capped_simplex_matches_grid(v):
    g = np.linspace(0.0, 1.0, 2001)
    a, b = np.meshgrid(g, g, indexing="ij")
    ok = a + b <= 1.0 + 1e-12
    d = (a - v[0]) ** 2 + (b - v[1]) ** 2
    d[~ok] = np.inf
    k = np.unravel_index(np.argmin(d), d.shape)
    np.testing.assert_allclose(project_capped_simplex(np.array(v)), [a[k], b[k]], atol=1e-3)


@given(seeds, st.integers(1, 8))
def test_project_capped_simplex_is_nearest_point(seed, n):
    rng = np.random.default_rng(seed)
    v = rng.normal(0.3, 0.8, n)
    p = project_capped_simplex(v)
    assert np.all(p >= 0) and np.all(p <= 1) and p.sum() <= 1 + 1e-12
    # optimality of the projection: (v - p) . (y - p) <= 0 for every feasible y
    e = rng.exponential(size=(300, n + 1))
    ys = (e / e.sum(axis=1, keepdims=True))[:, :n] * rng.uniform(0, 1, (300, 1))
    assert np.all((ys - p) @ (v - p) <= 1e-12)
    np.testing.assert_allclose(project_capped_simplex(p), p, atol=1e-15)


def test_project_capped_simplex_rows():
    v = np.array([[0.8, 0.8], [0.2, 0.3]])
    np.testing.assert_allclose(project_capped_simplex(v), [[0.5, 0.5], [0.2, 0.3]])


# ---------------------------------------------------------------- local descent


def unit_box(x):
    return np.clip(x, 0.0, 1.0)


def test_descent_interior_minimum():
    x, f, _ = local_descent(lambda z: float((z[0] - 0.3) ** 2), np.array([0.9]), unit_box,
                            gradient=lambda z: 2 * (z - 0.3))
    assert x[0] == pytest.approx(0.3, abs=1e-5)


def test_descent_boundary_minimum():
    x, _, _ = local_descent(lambda z: float((z[0] - 2) ** 2), np.array([0.1]), unit_box,
                            gradient=lambda z: 2 * (z - 2))
    assert x[0] == 1.0


def test_descent_with_finite_differences():
    x, _, _ = local_descent(lambda z: float(np.sum((z - 0.3) ** 2)), np.array([0.9, 0.0]), unit_box)
    np.testing.assert_allclose(x, [0.3, 0.3], atol=1e-5)


def test_descent_rejects_non_finite_objectives():
    with pytest.raises(DescentError):
        local_descent(lambda z: float("nan"), np.array([0.5]), unit_box, gradient=lambda z: z)
    with pytest.raises(DescentError):
        local_descent(lambda z: float(np.inf if z[0] < 0.4 else z[0]), np.array([0.5]), unit_box,
                      gradient=lambda z: np.ones(1))


@given(seeds)
def test_descent_stays_feasible_and_never_increases(seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(4, 4))
    Q = A @ A.T + 0.1 * np.eye(4)
    c = rng.normal(size=4)
    seen = []

    def f(z):
        val = float(0.5 * z @ Q @ z + c @ z + np.sin(3 * z).sum())
        return val

    def g(z):
        return Q @ z + c + 3 * np.cos(3 * z)

    def proj(z):
        p = project_capped_simplex(z)
        seen.append(p)
        return p

    x0 = project_capped_simplex(rng.uniform(0, 1, 4))
    x, fx, _ = local_descent(f, x0, proj, OptimizerOptions(max_iters=300), g)
    assert fx <= f(x0) + 1e-15
    for p in seen:
        assert np.all(p >= 0) and p.sum() <= 1 + 1e-12


# ---------------------------------------------------------------- problems and options


def test_options_validation():
    with pytest.raises(ValueError):
        OptimizerOptions(shrink=1.0)
    with pytest.raises(ValueError):
        OptimizerOptions(gradient="newton")
    with pytest.raises(ValueError):
        OptimizerOptions(smoothing=())
    with pytest.raises(ValueError):
        OptimizerOptions(fd_step=0.0)


def test_worker_count(monkeypatch):
    monkeypatch.delenv("DRMECH_THREADS", raising=False)
    assert worker_count() == 1
    monkeypatch.setenv("DRMECH_THREADS", "4")
    assert worker_count() == 4
    assert worker_count(OptimizerOptions(threads=2)) == 2


@given(seeds, st.sampled_from(MECHANISMS))
def test_problem_round_trip(seed, mechanism):
    rng = np.random.default_rng(seed)
    sc = random_scenario(rng)
    problem = make_problem(mechanism, sc)
    x = problem.project(problem.sample(rng))
    plan = problem.to_plan(x)
    plan.check(sc)
    np.testing.assert_allclose(problem.from_plan(plan), x, rtol=1e-12, atol=1e-12)
    assert problem.exact_objective(x) * problem.C0 == pytest.approx(evaluate(sc, plan)[1].total, rel=1e-9)


def test_rescale_discounts():
    p = rescale_discounts(RobustPlan([10.0, 20.0], [0.1, 0.2]), 0.5)
    np.testing.assert_array_equal(p.R, [5.0, 10.0])
    np.testing.assert_array_equal(p.q, [0.1, 0.2])
    assert isinstance(rescale_discounts(BasePlan([1.0, 2.0]), 2.0), BasePlan)


# ---------------------------------------------------------------- multi-start


def toy2():
    return toy_scenario(**TOY2)


def test_base_matches_fine_grid():
    sc = toy2()
    res = multi_start_minimize("base", sc, QUICK)
    best, _ = base_grid(sc, step=1e-3)
    assert res.best_objective <= best * (1 + 1e-3)
    assert abs(res.best_objective - best) / best < 1e-3


def test_determinism():
    sc = toy_scenario([18000.0, 14000.0, 16500.0], family="exponential", mu=0.5)
    for mechanism in MECHANISMS:
        a = multi_start_minimize(mechanism, sc, QUICK)
        b = multi_start_minimize(mechanism, sc, QUICK)
        assert a.best_objective == b.best_objective
        np.testing.assert_array_equal(a.best_plan.R, b.best_plan.R)
        assert [r.objective for r in a.per_start] == [r.objective for r in b.per_start]


def test_thread_count_does_not_change_results():
    sc = toy_scenario([18000.0, 14000.0, 16500.0], family="exponential", mu=0.5)
    one = multi_start_minimize("robust", sc, OptimizerOptions(starts=4, max_iters=400, threads=1))
    four = multi_start_minimize("robust", sc, OptimizerOptions(starts=4, max_iters=400, threads=4))
    assert [r.objective for r in one.per_start] == [r.objective for r in four.per_start]
    np.testing.assert_array_equal(one.best_plan.R, four.best_plan.R)


@pytest.mark.parametrize("mechanism", MECHANISMS)
def test_best_is_the_minimum_over_starts(mechanism):
    sc = toy_scenario([18000.0, 14000.0, 16500.0], family="exponential", mu=0.5)
    res = multi_start_minimize(mechanism, sc, QUICK)
    assert res.starts == len(res.per_start) == QUICK.starts + 1
    assert {r.kind for r in res.per_start} == {"random", "zero"}
    assert res.best_objective == pytest.approx(min(r.objective for r in res.per_start), rel=1e-12)
    assert res.best_breakdown.savings >= -1e-9 * sc.baseline_cost


def test_ranking_by_embedding():
    sc = toy_scenario([18000.0, 14000.0, 16500.0], family="exponential", mu=0.5)
    res = optimize_all(sc, ["base", "robust", "optimized"], OptimizerOptions(starts=2, max_iters=400))
    opt = res["optimized"].best_objective
    assert opt <= res["base"].best_objective + 1e-6
    assert opt <= res["robust"].best_objective + 1e-6
    kinds = [r.kind for r in res["optimized"].per_start]
    assert kinds.count("augmented") == 2


def test_extra_starts_are_never_worse():
    sc = toy_scenario([18000.0, 14000.0, 16500.0], family="exponential", mu=0.5)
    rob = multi_start_minimize("robust", sc, QUICK)
    warm = multi_start_minimize("optimized", sc, OptimizerOptions(starts=0, max_iters=50),
                                [embed_robust(sc, rob.best_plan)])
    assert warm.best_objective <= rob.best_objective - rob.best_breakdown.wasted_discounts + 1e-6


def test_embedded_base_start_is_kept():
    sc = toy2()
    base = multi_start_minimize("base", sc, QUICK)
    res = multi_start_minimize("optimized", sc, OptimizerOptions(starts=0, max_iters=1),
                               [embed_base(sc, base.best_plan)])
    assert isinstance(res.best_plan, OptimizedPlan)
    assert res.best_objective <= base.best_objective + 1e-6


def test_broadcast_reports_exact_cost():
    sc = toy_scenario([18000.0, 14000.0, 16500.0], family="exponential", mu=0.5)
    res = multi_start_minimize("broadcast", sc, QUICK)
    assert isinstance(res.best_plan, BroadcastPlan)
    assert res.best_objective == pytest.approx(evaluate(sc, res.best_plan, eps=0.0)[1].total, rel=1e-12)


def test_all_starts_aborting_raises(monkeypatch):
    import drmech.optimizer as opt

    def boom(*args, **kwargs):
        raise DescentError("boom")

    monkeypatch.setattr(opt, "_run_start", boom)
    with pytest.raises(OptimizationError) as info:
        multi_start_minimize("base", toy2(), OptimizerOptions(starts=2))
    assert len(info.value.per_start) == 3
    assert all(r.status.startswith("aborted") for r in info.value.per_start)
