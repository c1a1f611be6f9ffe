"""Policy synthesis for networked factored MDPs under graph temporal logic constraints."""

__version__ = "0.1.0"

from .graph import AgentGraph, GraphError, neighborhoods
from .gtl import GtlError, evaluate, format_formula, horizon, neighbor_reach, parse_gtl
from .model import (
    FactoredMdp,
    GraphTrajectory,
    ModelError,
    build_model,
    model_to_json,
    validate,
)

__all__ = [
    "AgentGraph",
    "GraphError",
    "neighborhoods",
    "GtlError",
    "parse_gtl",
    "format_formula",
    "horizon",
    "neighbor_reach",
    "evaluate",
    "FactoredMdp",
    "GraphTrajectory",
    "ModelError",
    "build_model",
    "model_to_json",
    "validate",
]
