"""Core of kiln: containers, data pipelines, graphs, step rules and the main loop."""

from core.context import (
    Backend,
    BatchPolicy,
    StreamSignal,
    Trigger,
    TrainingLog,
    TrainingStatus,
)
from core.errors import KilnError
from core.rng import Rng
from core.dataset import Dataset
from core.stream import Stream, StreamState
from core.graph import ComputationGraph, Role, Variable
from core.mainloop import MainLoop

__all__ = [
    "Backend",
    "BatchPolicy",
    "StreamSignal",
    "Trigger",
    "TrainingLog",
    "TrainingStatus",
    "KilnError",
    "Rng",
    "Dataset",
    "Stream",
    "StreamState",
    "ComputationGraph",
    "Role",
    "Variable",
    "MainLoop",
]
