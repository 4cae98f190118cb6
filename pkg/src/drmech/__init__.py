"""Demand-response tariff design: choice model, mechanisms, optimizer and simulator."""
from drmech.mechanisms import dictatorial_bound, evaluate
from drmech.model import (BasePlan, BroadcastPlan, CostBreakdown, DiscomfortModel, OptimizedPlan,
                          PiecewiseLinearCost, RobustPlan, Scenario, ScenarioError, ShiftMatrix,
                          validate_scenario)
from drmech.optimizer import OptimizerOptions, mu_sweep, multi_start_minimize, optimize_all

__version__ = "0.1.0"

__all__ = [
    "BasePlan", "BroadcastPlan", "CostBreakdown", "DiscomfortModel", "OptimizedPlan", "OptimizerOptions",
    "PiecewiseLinearCost", "RobustPlan", "Scenario", "ScenarioError", "ShiftMatrix", "dictatorial_bound",
    "evaluate", "mu_sweep", "multi_start_minimize", "optimize_all", "validate_scenario",
]
