"""
Training main loop with bit-exact checkpoint and resume.

Usage:
    loop = MainLoop(cost, stream, step_rules=[Adam()], extensions=[FinishAfter(epochs=5)])
    log = loop.run()

    # later, with an identically built loop:
    loop.load_snapshot("run/checkpoint.bfck")
    loop.run()
"""

import json
import signal
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.context import StreamSignal, Trigger, TrainingLog, TrainingStatus
from core.errors import KilnError, MainLoopError, SnapshotError
from core.extensions import Extension, bind_item
from core.graph import ComputationGraph, Variable, forward, generators, grad
from core.rng import Rng
from core.snapshot import read_snapshot, write_snapshot
from core.steprules import StepRule, StepRuleState, compute_steps, describe_chain, init_state
from core.stream import Stream, StreamState
from core.structured_logging import get_logger, log_error

logger = get_logger(__name__)

PathLike = Union[str, Path]


def parameter_key(var: Variable) -> str:
    """"/mlp/linear_0.W" for brick parameters, the bare name otherwise."""
    return f"{var.brick_path}.{var.name}" if var.brick_path else var.name


def _normalized(tree: Any) -> Any:
    return json.loads(json.dumps(tree, sort_keys=True))


class MainLoop:
    """
    Pulls items from a stream, applies the step rule chain to the gradients
    of a scalar cost and fires extensions at batch and epoch boundaries.

    Attributes:
        cost: Scalar cost variable
        parameters: Trained parameters, keyed by parameter_key()
        step_rules: Rule chain; the same objects extensions may adjust
        stream: Training stream
        extensions: In registration order
        constraints: Post-update hooks with an apply(parameters) method
        rngs: Generators saved with every snapshot: the ones passed in plus
            those of the graph's stochastic ops (dropout, weight noise)
        status, log: Progress counters and channel log
        metadata: JSON-serializable data stored verbatim in snapshots
    """

    def __init__(
        self,
        cost: Variable,
        stream: Stream,
        step_rules: Sequence[StepRule] = (),
        extensions: Sequence[Extension] = (),
        parameters: Optional[Sequence[Variable]] = None,
        constraints: Sequence[Any] = (),
        rngs: Optional[Dict[str, Rng]] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ):
        if cost.shape != ():
            raise MainLoopError(f"cost must be a scalar, got shape {list(cost.shape)}")
        graph = ComputationGraph([cost])
        params = list(graph.parameters if parameters is None else parameters)
        if not params:
            raise MainLoopError("nothing to train: the cost depends on no parameters")
        for var in params:
            if var.value is None:
                raise MainLoopError(f"parameter {var.name!r} has no storage; initialize it first")

        keys = [parameter_key(var) for var in params]
        duplicates = sorted({k for k in keys if keys.count(k) > 1})
        if duplicates:
            raise MainLoopError(f"duplicate parameter keys {duplicates}")

        names = [ext.name for ext in extensions]
        clashing = sorted({n for n in names if names.count(n) > 1})
        if clashing:
            raise MainLoopError(f"duplicate extension names {clashing}")

        input_names = sorted(var.name for var in graph.inputs)
        if stream.sources:
            missing = [name for name in input_names if name not in stream.sources]
            if missing:
                raise MainLoopError(
                    f"graph inputs {missing} have no matching stream source (stream has {stream.sources})"
                )

        self.cost = cost
        self.parameters: Dict[str, Variable] = dict(zip(keys, params))
        self.step_rules = list(step_rules)
        self.stream = stream
        self.extensions = list(extensions)
        self.constraints = list(constraints)
        self.rngs: Dict[str, Rng] = dict(rngs or {})
        self.metadata: Dict[str, Any] = dict(metadata or {})

        self.status = TrainingStatus()
        self.log = TrainingLog()
        self.rule_state: StepRuleState = init_state(
            self.step_rules, {key: var.value.shape for key, var in self.parameters.items()}
        )
        self.rule_chain_spec = _normalized(describe_chain(self.step_rules))
        self.pipeline_spec = _normalized(stream.describe())
        self.interrupted = False

        gradients = grad(cost, params)
        self._gradients: List[Tuple[str, Variable]] = list(zip(keys, gradients))
        self._train_graph = ComputationGraph([cost, *gradients])
        for key, rng in generators(self._train_graph).items():
            if self.rngs.setdefault(key, rng) is not rng:
                raise MainLoopError(f"generator name {key!r} is already taken")
        self._pending_snapshots: List[Tuple[Path, bool]] = []
        self._interrupt_requested = False

        for ext in self.extensions:
            ext.bind(self)

    # -------------------------------------------------------------------------
    # Running
    # -------------------------------------------------------------------------

    def request_interrupt(self) -> None:
        """Ask the loop to stop at the next batch boundary (what SIGINT does)."""
        self._interrupt_requested = True

    def _on_sigint(self, signum: int, frame: Any) -> None:
        logger.warning("Interrupt received; stopping at the next batch boundary", extra={"event": "sigint"})
        self._interrupt_requested = True

    def run(self) -> TrainingLog:
        """
        Train until an extension requests a stop or the stream is exhausted.

        Returns:
            The training log

        Raises:
            MainLoopError: an extension failed (ON_INTERRUPT has fired), or
                the stream and graph disagree
        """
        previous_handler = None
        if threading.current_thread() is threading.main_thread():
            previous_handler = signal.signal(signal.SIGINT, self._on_sigint)
        try:
            return self._run()
        finally:
            if previous_handler is not None:
                signal.signal(signal.SIGINT, previous_handler)

    def _run(self) -> TrainingLog:
        status = self.status
        logger.info(
            f"Training from iteration {status.iterations_done}",
            extra={"event": "training_started", "iteration": status.iterations_done, "epoch": status.epochs_done},
        )
        if not status.training_started:
            status.training_started = True
            self._fire(Trigger.BEFORE_TRAINING)

        while not status.stop_requested:
            if self._interrupt_requested:
                self._interrupt()
                return self.log

            if not status.epoch_started:
                status.epoch_started = True
                status.batches_in_epoch = 0
                self._fire(Trigger.BEFORE_EPOCH)
                continue

            pulled = self.stream.get_next()
            if pulled is StreamSignal.EXHAUSTED:
                break
            if pulled is StreamSignal.EPOCH_END:
                empty = status.batches_in_epoch == 0
                status.epochs_done += 1
                status.epoch_started = False
                self._fire(Trigger.AFTER_EPOCH)
                if empty:
                    logger.warning(
                        "Training stream produced an empty epoch; stopping",
                        extra={"event": "empty_epoch", "epoch": status.epochs_done},
                    )
                    break
                continue

            self._fire(Trigger.BEFORE_BATCH)
            cost = self._process(pulled)
            status.iterations_done += 1
            status.batches_in_epoch += 1
            self.log.record(status.iterations_done, "train_cost", cost)
            self._fire(Trigger.AFTER_BATCH)

        status.training_finished = True
        self._fire(Trigger.AFTER_TRAINING)
        logger.info(
            f"Training finished after {status.iterations_done} iterations",
            extra={"event": "training_finished", "iteration": status.iterations_done, "epoch": status.epochs_done},
        )
        return self.log

    def _process(self, item: Dict[str, np.ndarray]) -> float:
        values = forward(self._train_graph, bind_item(self._train_graph, item))
        grads = {key: values[g] for key, g in self._gradients}
        steps, self.rule_state = compute_steps(self.step_rules, self.rule_state, grads)
        for key, var in self.parameters.items():
            var.value = var.value - steps[key]
        params = list(self.parameters.values())
        for constraint in self.constraints:
            constraint.apply(params)
        return float(values[self.cost])

    def _interrupt(self) -> None:
        self._interrupt_requested = False
        self.interrupted = True
        logger.warning(
            f"Training interrupted at iteration {self.status.iterations_done}",
            extra={"event": "training_interrupted", "iteration": self.status.iterations_done},
        )
        self._fire(Trigger.ON_INTERRUPT)

    def _fire(self, trigger: Trigger) -> None:
        for ext in self.extensions:
            if trigger not in ext.triggers:
                continue
            try:
                ext.fire(trigger, self)
            except Exception as e:
                log_error(e, context=f"extension {ext.name}", operation=trigger.value, iteration=self.status.iterations_done)
                if trigger is Trigger.ON_INTERRUPT:
                    continue
                self._fire(Trigger.ON_INTERRUPT)
                raise MainLoopError(f"extension {ext.name!r} failed at {trigger.value}: {e}") from e
        self._write_pending_snapshots()

    # -------------------------------------------------------------------------
    # Snapshots
    # -------------------------------------------------------------------------

    def schedule_snapshot(self, path: PathLike, abort_on_error: bool = False) -> None:
        """Write a snapshot once every extension of the current trigger has run."""
        self._pending_snapshots.append((Path(path), abort_on_error))

    def _write_pending_snapshots(self) -> None:
        pending, self._pending_snapshots = self._pending_snapshots, []
        for path, abort_on_error in pending:
            try:
                self.save_snapshot(path)
            except (OSError, KilnError) as e:
                log_error(e, context="checkpoint", operation="snapshot_write", path=str(path))
                if abort_on_error:
                    raise MainLoopError(f"checkpoint {path} failed: {e}") from e

    def state_dict(self) -> Dict[str, Any]:
        """Complete training state as a tree whose leaves may be arrays."""
        return {
            "status": self.status.to_dict(),
            "log": self.log.to_list(),
            "parameters": {key: var.value for key, var in self.parameters.items()},
            "step_rule_state": self.rule_state.to_tree(),
            "stream_state": self.stream.save_state().to_dict(),
            "rngs": {name: rng.state_dict() for name, rng in self.rngs.items()},
            "extensions": {ext.name: ext.state_dict() for ext in self.extensions},
            "rule_chain": self.rule_chain_spec,
            "pipeline": self.pipeline_spec,
            "metadata": self.metadata,
        }

    def save_snapshot(self, path: PathLike) -> Path:
        return write_snapshot(path, self.state_dict())

    def load_snapshot(self, path: PathLike) -> "MainLoop":
        """
        Restore the state saved in a snapshot into this (identically built) loop.

        Raises:
            SnapshotError: corrupt file, wrong version, or a rule chain,
                pipeline or parameter set different from this loop's
        """
        state = read_snapshot(path)
        self.load_state_dict(state)
        logger.info(
            f"Resuming from snapshot at iteration {self.status.iterations_done}",
            extra={"event": "snapshot_loaded", "path": str(path), "iteration": self.status.iterations_done},
        )
        return self

    def load_state_dict(self, state: Dict[str, Any]) -> None:
        try:
            rule_chain, pipeline = state["rule_chain"], state["pipeline"]
            params = state["parameters"]
        except KeyError as e:
            raise SnapshotError(f"snapshot is missing {e}") from e
        if _normalized(rule_chain) != self.rule_chain_spec:
            raise SnapshotError(f"rule chain mismatch: snapshot has {rule_chain}, loop has {self.rule_chain_spec}")
        if _normalized(pipeline) != self.pipeline_spec:
            raise SnapshotError("pipeline mismatch: the snapshot was taken with a different pipeline")
        if sorted(params) != sorted(self.parameters):
            raise SnapshotError(f"parameter mismatch: snapshot has {sorted(params)}, loop has {sorted(self.parameters)}")
        for key, var in self.parameters.items():
            if tuple(params[key].shape) != tuple(var.value.shape):
                raise SnapshotError(
                    f"parameter {key} has shape {list(params[key].shape)} in the snapshot, {list(var.value.shape)} here"
                )
        missing_rngs = sorted(set(self.rngs) - set(state.get("rngs", {})))
        if missing_rngs:
            raise SnapshotError(f"snapshot has no state for generators {missing_rngs}")

        try:
            rule_state = StepRuleState.from_tree(state["step_rule_state"])
            stream_state = StreamState.from_dict(state["stream_state"])
            status = TrainingStatus.from_dict(state["status"])
            log = TrainingLog.from_list(state["log"])
        except (KeyError, TypeError, ValueError, KilnError) as e:
            raise SnapshotError(f"corrupt snapshot state: {e}") from e
        if rule_state.kinds != [rule.kind for rule in self.step_rules] or rule_state.shapes != {
            key: tuple(var.value.shape) for key, var in self.parameters.items()
        }:
            raise SnapshotError("step rule state does not fit this loop")
        try:
            self.stream.load_state(stream_state)
        except KilnError as e:
            raise SnapshotError(f"cannot restore the stream: {e}") from e

        for key, var in self.parameters.items():
            var.value = np.array(params[key], dtype=np.float64)
        self.rule_state = rule_state
        for name, rng in self.rngs.items():
            rng.load_state_dict(state["rngs"][name])

        saved_extensions = state.get("extensions", {})
        for ext in self.extensions:
            if ext.name in saved_extensions:
                ext.load_state_dict(saved_extensions[ext.name])
            else:
                logger.warning(
                    f"Snapshot has no state for extension {ext.name!r}; starting it fresh",
                    extra={"event": "extension_state_missing"},
                )

        status.stop_requested = False
        status.training_finished = False
        self.status = status
        self.log = log
        self.metadata = dict(state.get("metadata") or self.metadata)
        self.interrupted = False


def run(
    cost: Variable,
    stream: Stream,
    step_rules: Sequence[StepRule] = (),
    extensions: Sequence[Extension] = (),
    **kwargs: Any,
) -> TrainingLog:
    return MainLoop(cost, stream, step_rules, extensions, **kwargs).run()


def load(main_loop: MainLoop, path: PathLike) -> MainLoop:
    """Restore `main_loop` from a snapshot; it continues from the saved batch boundary."""
    return main_loop.load_snapshot(path)


def resume(main_loop: MainLoop) -> TrainingLog:
    return main_loop.run()
