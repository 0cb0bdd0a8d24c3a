"""
Main loop extensions.

An extension declares the triggers it listens to and is called as
`extension.fire(trigger, main_loop)` at each of them, in registration order.
Whatever an extension needs to continue bit-exactly after a resume goes into
`state_dict()`; the main loop stores it in snapshots under the extension's
name.
"""

import math
import sys
from pathlib import Path
from typing import IO, TYPE_CHECKING, Any, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from core.context import StreamSignal, Trigger
from core.errors import MainLoopError
from core.graph import ComputationGraph, Variable, forward
from core.stream import Stream, StreamState
from core.structured_logging import get_logger

if TYPE_CHECKING:
    from core.mainloop import MainLoop

logger = get_logger(__name__)


def bind_item(cg: ComputationGraph, item: Dict[str, np.ndarray]) -> Dict[Variable, np.ndarray]:
    """Map stream sources onto the graph inputs of the same name."""
    bindings = {}
    for var in cg.inputs:
        if var.name not in item:
            raise MainLoopError(
                f"graph input {var.name!r} has no matching stream source (have {sorted(item)})"
            )
        bindings[var] = item[var.name]
    return bindings


class Extension:
    """Base class; subclasses set `kind` and `triggers` and override fire()."""

    kind: str = "extension"

    def __init__(self, name: Optional[str] = None, triggers: Iterable[Trigger] = ()):
        self.name = name or self.kind
        self.triggers = frozenset(triggers)

    def bind(self, main_loop: "MainLoop") -> None:
        """Called once when the extension is attached to a main loop."""

    def fire(self, trigger: Trigger, main_loop: "MainLoop") -> None:
        raise NotImplementedError

    def state_dict(self) -> Dict[str, Any]:
        return {}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        pass

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.kind, "name": self.name, "triggers": sorted(t.value for t in self.triggers)}

    def __repr__(self) -> str:
        return f"{type(self).__name__}(name={self.name!r})"


class FinishAfter(Extension):
    """Request a stop once n iterations or n epochs are done."""

    kind = "finish_after"

    def __init__(self, iterations: Optional[int] = None, epochs: Optional[int] = None, name: Optional[str] = None):
        if iterations is None and epochs is None:
            raise MainLoopError("finish_after needs iterations or epochs")
        triggers = []
        if iterations is not None:
            triggers.append(Trigger.AFTER_BATCH)
        if epochs is not None:
            triggers.append(Trigger.AFTER_EPOCH)
        super().__init__(name, triggers)
        self.iterations = iterations
        self.epochs = epochs

    def fire(self, trigger: Trigger, main_loop: "MainLoop") -> None:
        status = main_loop.status
        if self.iterations is not None and status.iterations_done >= self.iterations:
            status.stop_requested = True
        if self.epochs is not None and status.epochs_done >= self.epochs:
            status.stop_requested = True

    def describe(self) -> Dict[str, Any]:
        return {**super().describe(), "iterations": self.iterations, "epochs": self.epochs}


class Printing(Extension):
    """
    One human-readable line per trigger with the latest value of every channel.

    every_n adds AFTER_BATCH printing every n iterations; epochs and the end
    of training are always printed.
    """

    kind = "printing"

    def __init__(self, every_n: Optional[int] = None, output: Optional[IO[str]] = None, name: Optional[str] = None):
        triggers = [Trigger.AFTER_EPOCH, Trigger.AFTER_TRAINING]
        if every_n:
            triggers.append(Trigger.AFTER_BATCH)
        super().__init__(name, triggers)
        self.every_n = every_n
        self.output = output

    def fire(self, trigger: Trigger, main_loop: "MainLoop") -> None:
        status = main_loop.status
        if trigger is Trigger.AFTER_BATCH and status.iterations_done % self.every_n:
            return
        channels = {name: main_loop.log.last(name) for name in main_loop.log.channels()}
        values = " ".join(f"{name}={value:.6g}" for name, value in channels.items() if value is not None)
        line = f"[{trigger.value}] iteration {status.iterations_done} epoch {status.epochs_done}: {values}".rstrip()
        print(line, file=self.output or sys.stdout)

    def describe(self) -> Dict[str, Any]:
        return {**super().describe(), "every_n": self.every_n}


class LogToFile(Extension):
    """
    Append one JSON line per logged iteration.

    An iteration is written once the loop has moved past it (at the next
    BEFORE_BATCH, or at AFTER_TRAINING), so channels recorded late for that
    iteration, such as epoch-end monitoring, land on the same line. The state
    holds the byte offset of the file; a resumed run truncates back to it.
    """

    kind = "log_to_file"

    def __init__(self, path: Union[str, Path], name: Optional[str] = None):
        super().__init__(name, [Trigger.BEFORE_TRAINING, Trigger.BEFORE_BATCH, Trigger.AFTER_TRAINING])
        self.path = Path(path)
        self.last_written = -1
        self.offset = 0
        self._truncate_pending = False

    def fire(self, trigger: Trigger, main_loop: "MainLoop") -> None:
        if trigger is Trigger.BEFORE_TRAINING:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_bytes(b"")
            self.last_written, self.offset = -1, 0
            return
        if trigger is Trigger.AFTER_TRAINING:
            self._flush(main_loop, None)
        else:
            self._flush(main_loop, main_loop.status.iterations_done)

    def _flush(self, main_loop: "MainLoop", upto: Optional[int]) -> None:
        rows = [
            (k, row) for k, row in main_loop.log.items()
            if k > self.last_written and (upto is None or k <= upto)
        ]
        if not rows and not self._truncate_pending:
            return
        try:
            if self._truncate_pending:
                self._truncate()
            with open(self.path, "ab") as f:
                for iteration, channels in rows:
                    f.write((main_loop.log.format_line(iteration, channels) + "\n").encode("utf-8"))
                self.offset = f.tell()
        except OSError as e:
            logger.error(
                f"Could not write log file {self.path}: {e}",
                extra={"event": "log_write_failed", "path": str(self.path), "error_type": type(e).__name__},
            )
            return
        if rows:
            self.last_written = rows[-1][0]

    def _truncate(self) -> None:
        size = self.path.stat().st_size if self.path.exists() else 0
        if size < self.offset:
            raise MainLoopError(
                f"log file {self.path} has {size} bytes, checkpoint expects at least {self.offset}"
            )
        if self.path.exists():
            with open(self.path, "r+b") as f:
                f.truncate(self.offset)
        self._truncate_pending = False

    def state_dict(self) -> Dict[str, Any]:
        return {"last_written": self.last_written, "offset": self.offset}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.last_written = int(state["last_written"])
        self.offset = int(state["offset"])
        self._truncate_pending = True

    def describe(self) -> Dict[str, Any]:
        return {**super().describe(), "path": str(self.path)}


class Checkpoint(Extension):
    """
    Schedule a snapshot every n iterations, at listed iterations and on interrupt.

    `path` may contain "{iteration}" to keep one file per checkpoint. The main
    loop writes the snapshot after every extension of the trigger has run.
    """

    kind = "checkpoint"

    def __init__(
        self,
        path: Union[str, Path],
        every_n_iterations: Optional[int] = None,
        at_iterations: Sequence[int] = (),
        after_training: bool = False,
        abort_on_error: bool = False,
        name: Optional[str] = None,
    ):
        if every_n_iterations is not None and every_n_iterations < 1:
            raise MainLoopError(f"every_n_iterations must be >= 1, got {every_n_iterations}")
        triggers = [Trigger.AFTER_BATCH, Trigger.ON_INTERRUPT]
        if after_training:
            triggers.append(Trigger.AFTER_TRAINING)
        super().__init__(name, triggers)
        self.path = str(path)
        self.every_n_iterations = every_n_iterations
        self.at_iterations = frozenset(int(k) for k in at_iterations)
        self.abort_on_error = abort_on_error

    def path_for(self, iteration: int) -> Path:
        return Path(self.path.format(iteration=iteration))

    def fire(self, trigger: Trigger, main_loop: "MainLoop") -> None:
        k = main_loop.status.iterations_done
        if trigger is Trigger.AFTER_BATCH:
            due = k in self.at_iterations or (
                self.every_n_iterations is not None and k % self.every_n_iterations == 0
            )
            if not due:
                return
        main_loop.schedule_snapshot(self.path_for(k), abort_on_error=self.abort_on_error)

    def describe(self) -> Dict[str, Any]:
        return {
            **super().describe(),
            "path": self.path,
            "every_n_iterations": self.every_n_iterations,
            "at_iterations": sorted(self.at_iterations),
        }


class DataStreamMonitoring(Extension):
    """
    Evaluate scalar channels over one full pass of a validation stream.

    Each channel is the example-weighted mean of its per-batch values and is
    logged as "<prefix>_<channel name>" at the current iteration. An empty
    pass logs NaN and a warning.
    """

    kind = "monitoring"

    def __init__(
        self,
        stream: Stream,
        channels: Sequence[Variable],
        prefix: str = "valid",
        triggers: Iterable[Trigger] = (Trigger.AFTER_EPOCH,),
        name: Optional[str] = None,
    ):
        super().__init__(name, triggers)
        for var in channels:
            if var.shape != ():
                raise MainLoopError(f"monitored channel {var.name!r} is not a scalar: {list(var.shape)}")
            if not var.name:
                raise MainLoopError("monitored channels must be named")
        names = [var.name for var in channels]
        if len(set(names)) != len(names):
            raise MainLoopError(f"duplicate channel names {names}")
        self.stream = stream
        self.channels = list(channels)
        self.prefix = prefix
        self._graph = ComputationGraph(self.channels)

    @staticmethod
    def _batch_size(item: Dict[str, np.ndarray], cg: ComputationGraph) -> int:
        for var in cg.inputs:
            if var.name not in item:
                raise MainLoopError(f"validation item has no source {var.name!r} (has {sorted(item)})")
            value = np.asarray(item[var.name])
            if var.ndim and var.shape[0] is None:
                return int(value.shape[0])
        return 1

    def evaluate(self) -> Dict[str, float]:
        """One pass over the validation stream; {channel name: weighted mean}."""
        totals: Dict[str, List[float]] = {var.name: [] for var in self.channels}
        count = 0
        while True:
            pulled = self.stream.get_next()
            if isinstance(pulled, StreamSignal):
                break
            size = self._batch_size(pulled, self._graph)
            if size == 0:
                continue
            values = forward(self._graph, bind_item(self._graph, pulled))
            for var in self.channels:
                totals[var.name].append(float(values[var]) * size)
            count += size

        if count == 0:
            logger.warning(
                "Validation stream produced no examples; channels logged as NaN",
                extra={"event": "monitoring_empty"},
            )
            return {name: math.nan for name in totals}
        return {name: math.fsum(parts) / count for name, parts in totals.items()}

    def fire(self, trigger: Trigger, main_loop: "MainLoop") -> None:
        iteration = main_loop.status.iterations_done
        for name, value in self.evaluate().items():
            main_loop.log.record(iteration, f"{self.prefix}_{name}", value)

    def state_dict(self) -> Dict[str, Any]:
        return {"stream": self.stream.save_state().to_dict()}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        self.stream.load_state(StreamState.from_dict(state["stream"]))

    def describe(self) -> Dict[str, Any]:
        return {
            **super().describe(),
            "prefix": self.prefix,
            "channels": [var.name for var in self.channels],
            "stream": self.stream.describe(),
        }


class LearningRateSchedule(Extension):
    """
    Multiply the learning rate of one rule in the chain by `factor` every
    `every_n_epochs` epochs; the current rate is logged as "learning_rate".
    """

    kind = "learning_rate_schedule"

    def __init__(self, rule_index: int = 0, factor: float = 0.5, every_n_epochs: int = 1, name: Optional[str] = None):
        if every_n_epochs < 1:
            raise MainLoopError(f"every_n_epochs must be >= 1, got {every_n_epochs}")
        super().__init__(name, [Trigger.AFTER_EPOCH])
        self.rule_index = rule_index
        self.factor = float(factor)
        self.every_n_epochs = every_n_epochs
        self._rule: Any = None

    def _target(self, main_loop: "MainLoop") -> Any:
        try:
            rule = main_loop.step_rules[self.rule_index]
        except IndexError:
            raise MainLoopError(f"rule chain has no rule at index {self.rule_index}") from None
        if not hasattr(rule, "learning_rate"):
            raise MainLoopError(f"{rule.kind!r} rule has no learning rate to schedule")
        return rule

    def bind(self, main_loop: "MainLoop") -> None:
        self._rule = self._target(main_loop)

    def fire(self, trigger: Trigger, main_loop: "MainLoop") -> None:
        rule = self._target(main_loop)
        if main_loop.status.epochs_done % self.every_n_epochs == 0:
            rule.learning_rate = rule.learning_rate * self.factor
        main_loop.log.record(main_loop.status.iterations_done, "learning_rate", rule.learning_rate)

    def state_dict(self) -> Dict[str, Any]:
        return {"learning_rate": None if self._rule is None else self._rule.learning_rate}

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        if self._rule is not None and state.get("learning_rate") is not None:
            self._rule.learning_rate = float(state["learning_rate"])

    def describe(self) -> Dict[str, Any]:
        return {
            **super().describe(),
            "rule_index": self.rule_index,
            "factor": self.factor,
            "every_n_epochs": self.every_n_epochs,
        }


EXTENSIONS = {
    cls.kind: cls
    for cls in (FinishAfter, Printing, LogToFile, Checkpoint, DataStreamMonitoring, LearningRateSchedule)
}
