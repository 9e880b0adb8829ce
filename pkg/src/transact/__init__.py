"""Structured pruning toolkit for decoder-only transformers."""

__version__ = "0.1.0"

from .config import ModelConfig
from .model import ForwardTrace, LayerWeights, ModelWeights, forward
from .container import load_config, load_model, save_config, save_model
from .calib import CalibSet, CalibStats, collect_stats, merge_stats
from .pruner import MetricConfig, PruneTarget, SalienceReport, build_report, prune_model, select_topk
from .recovery import least_squares_recovery
from .schedule import PruneSchedule, plan_schedule, run_schedule
from .analytics import count_params, flops_estimate, kv_cache_values, sweep_grid
from .evaluate import EvalResult, compare_metrics, perplexity

__all__ = [
    "__version__",
    "ModelConfig",
    "ModelWeights",
    "LayerWeights",
    "ForwardTrace",
    "forward",
    "load_model",
    "save_model",
    "load_config",
    "save_config",
    "CalibSet",
    "CalibStats",
    "collect_stats",
    "merge_stats",
    "MetricConfig",
    "PruneTarget",
    "SalienceReport",
    "build_report",
    "prune_model",
    "select_topk",
    "least_squares_recovery",
    "PruneSchedule",
    "plan_schedule",
    "run_schedule",
    "count_params",
    "kv_cache_values",
    "flops_estimate",
    "sweep_grid",
    "EvalResult",
    "perplexity",
    "compare_metrics",
]
