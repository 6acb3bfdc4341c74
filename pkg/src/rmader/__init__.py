"""Deterministic simulator for asynchronous multi-agent trajectory deconfliction."""

__version__ = "0.1.0"

from .geometry import BoundaryBox, SeparatingPlane, check_pair_collision, sampling_oracle_collision
from .harness import ExperimentSpec, emit_report, resolve_delta_dc, run_case, run_experiment
from .netsim import AgentSpec, RunMetrics, Scenario, run
from .planner import Infeasible, PlannerConfig, PlanRequest, PlanResult, make_request, plan
from .trajectory import DynamicLimits, PolySegment, Trajectory, smoothness_integrals

__all__ = [
    "__version__",
    "AgentSpec",
    "BoundaryBox",
    "DynamicLimits",
    "ExperimentSpec",
    "Infeasible",
    "PlanRequest",
    "PlanResult",
    "PlannerConfig",
    "PolySegment",
    "RunMetrics",
    "Scenario",
    "SeparatingPlane",
    "Trajectory",
    "check_pair_collision",
    "emit_report",
    "make_request",
    "plan",
    "resolve_delta_dc",
    "run",
    "run_case",
    "run_experiment",
    "sampling_oracle_collision",
    "smoothness_integrals",
]
