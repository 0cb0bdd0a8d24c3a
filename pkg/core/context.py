"""
Core data models for kiln.

Enums and small state containers shared across the data pipeline and the
training loop. Everything here is a plain dataclass or Enum that can be
converted to and from JSON-compatible dicts.
"""

import json
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Tuple


class BatchPolicy(Enum):
    """What to do with a short final batch."""
    KEEP = "keep"
    DROP = "drop"


class StreamSignal(Enum):
    """
    In-band stream markers, distinct from data items.

    EPOCH_END separates passes over the data; EXHAUSTED means the stream
    will never produce anything again.
    """
    EPOCH_END = "epoch_end"
    EXHAUSTED = "exhausted"


class Backend(Enum):
    """Storage strategy of an opened dataset split."""
    IN_MEMORY = "in_memory"
    OUT_OF_CORE = "out_of_core"


class Trigger(Enum):
    """Points in the main loop where extensions run."""
    BEFORE_TRAINING = "before_training"
    BEFORE_EPOCH = "before_epoch"
    BEFORE_BATCH = "before_batch"
    AFTER_BATCH = "after_batch"
    AFTER_EPOCH = "after_epoch"
    AFTER_TRAINING = "after_training"
    ON_INTERRUPT = "on_interrupt"


@dataclass
class TrainingStatus:
    """
    Progress counters of a main loop.

    Attributes:
        iterations_done: Batches processed so far
        epochs_done: Completed passes over the training stream
        training_finished: Set once AFTER_TRAINING fired
        stop_requested: Set by extensions to end training at the next boundary
        training_started: BEFORE_TRAINING already fired
        epoch_started: BEFORE_EPOCH fired for the epoch in progress
        batches_in_epoch: Batches processed in the epoch in progress
    """
    iterations_done: int = 0
    epochs_done: int = 0
    training_finished: bool = False
    stop_requested: bool = False
    training_started: bool = False
    epoch_started: bool = False
    batches_in_epoch: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainingStatus":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class TrainingLog:
    """
    Append-only record of scalar channels per iteration.

    Example:
        log = TrainingLog()
        log.record(1, "train_cost", 0.69)
        log[1]["train_cost"]  # 0.69
    """

    def __init__(self) -> None:
        self._rows: Dict[int, Dict[str, float]] = {}
        self._last_iteration: Optional[int] = None

    def record(self, iteration: int, channel: str, value: float) -> None:
        if self._last_iteration is not None and iteration < self._last_iteration:
            raise ValueError(
                f"log is append-only: iteration {iteration} < {self._last_iteration}"
            )
        self._rows.setdefault(iteration, {})[channel] = float(value)
        self._last_iteration = iteration

    def __getitem__(self, iteration: int) -> Dict[str, float]:
        return self._rows[iteration]

    def __contains__(self, iteration: int) -> bool:
        return iteration in self._rows

    def __iter__(self) -> Iterator[int]:
        return iter(self._rows)

    def __len__(self) -> int:
        return len(self._rows)

    def items(self) -> List[Tuple[int, Dict[str, float]]]:
        return [(k, dict(v)) for k, v in self._rows.items()]

    def channels(self) -> List[str]:
        """Channel names in order of first appearance."""
        seen: Dict[str, None] = {}
        for row in self._rows.values():
            for name in row:
                seen.setdefault(name, None)
        return list(seen)

    def last(self, channel: str) -> Optional[float]:
        for row in reversed(list(self._rows.values())):
            if channel in row:
                return row[channel]
        return None

    @staticmethod
    def format_line(iteration: int, channels: Dict[str, float]) -> str:
        """One strict JSON-lines record; NaN and infinities are written as null."""
        finite = {name: value if math.isfinite(value) else None for name, value in channels.items()}
        return json.dumps({"iteration": iteration, "channels": finite}, sort_keys=True, allow_nan=False)

    def to_list(self) -> List[List[Any]]:
        return [[k, dict(v)] for k, v in self._rows.items()]

    @classmethod
    def from_list(cls, rows: List[List[Any]]) -> "TrainingLog":
        log = cls()
        for iteration, channels in rows:
            for name, value in channels.items():
                log.record(int(iteration), name, value)
        return log

    @classmethod
    def from_json_lines(cls, lines: List[str]) -> "TrainingLog":
        log = cls()
        for line in lines:
            if not line.strip():
                continue
            record = json.loads(line)
            for name, value in record["channels"].items():
                log.record(int(record["iteration"]), name, math.nan if value is None else value)
        return log

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TrainingLog):
            return NotImplemented
        return self.to_list() == other.to_list()

    def __repr__(self) -> str:
        return f"TrainingLog({len(self)} iterations, channels={self.channels()})"
