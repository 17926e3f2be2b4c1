"""Text-program optimization: programs, engines, inner and meta optimizers, bounds and a run harness."""

from .bounds import BoundQuery, BoundResult, empirical_bound_check, hoeffding_epsilon, theorem1_bound
from .engine import CachedEngine, EchoEngine, EngineRequest, EngineSet, HTTPEngine, ScriptedEngine
from .meta import InnerRunner, run_metatextgrad, run_outer_loop
from .optimizers import OptimizerSpec, make_optimizer, run_inner_loop
from .program import PipelineSpec, Program, TextVariable, forward, validate_spec
from .tasks import Metric, TaskDataset, evaluate_program, metric_evaluate

__version__ = "0.1.0"

__all__ = [
    "BoundQuery", "BoundResult", "empirical_bound_check", "hoeffding_epsilon", "theorem1_bound",
    "CachedEngine", "EchoEngine", "EngineRequest", "EngineSet", "HTTPEngine", "ScriptedEngine",
    "InnerRunner", "run_metatextgrad", "run_outer_loop",
    "OptimizerSpec", "make_optimizer", "run_inner_loop",
    "PipelineSpec", "Program", "TextVariable", "forward", "validate_spec",
    "Metric", "TaskDataset", "evaluate_program", "metric_evaluate",
]
