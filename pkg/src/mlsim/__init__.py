"""Multi-level influence/reaction simulation engine.

Core pieces: a validated level graph (influence + perception relations),
immutable system snapshots, a deterministic two-phase step driver
(influence production, then per-level constraint filtering and reaction),
an emergence/constraint hierarchy layer, and a gradient-field AGV fleet
reference model with deadlock detection and constraint-based resolution.
"""

from .engine import Model, RunResult, produce_influences, react, run, step
from .hierarchy import apply_constraints
from .levels import LevelGraphSpec, ValidatedLevelGraph, validate
from .state import Influence, LevelState, SystemState

__all__ = [
    "Model",
    "RunResult",
    "produce_influences",
    "react",
    "run",
    "step",
    "apply_constraints",
    "LevelGraphSpec",
    "ValidatedLevelGraph",
    "validate",
    "Influence",
    "LevelState",
    "SystemState",
]

__version__ = "0.1.0"
