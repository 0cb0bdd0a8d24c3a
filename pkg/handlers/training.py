"""
Training subcommands: train (optionally resuming) and inspect-snapshot.
"""

from core.context import TrainingLog, TrainingStatus
from core.experiment import load_train_spec, run_experiment
from core.snapshot import read_snapshot
from core.structured_logging import Timer, get_logger
from handlers.base import BaseHandler, HandlerContext, HandlerResult

logger = get_logger(__name__)


class TrainHandler(BaseHandler):
    """Build the demo experiment from a training spec and run it."""

    command = "train"

    def handle(self, ctx: HandlerContext) -> HandlerResult:
        spec = load_train_spec(ctx.args.spec)
        with Timer() as timer:
            experiment = run_experiment(spec, resume_from=ctx.args.resume)
        loop = experiment.main_loop
        logger.info(
            f"Training run ended after {loop.status.iterations_done} iterations",
            extra={"event": "train_command_done", "elapsed_ms": timer.elapsed_ms},
        )
        status = loop.status
        summary = (
            f"iterations {status.iterations_done}, epochs {status.epochs_done}, "
            f"train_cost {loop.log.last('train_cost')}"
        )
        if loop.interrupted:
            summary += " (interrupted)"
        ctx.add_debug(f"train: {len(loop.log)} logged iterations in {timer.elapsed_ms}ms")
        return HandlerResult(output=summary)


class InspectSnapshotHandler(BaseHandler):
    """Print the status counters and log channels stored in a snapshot."""

    command = "inspect-snapshot"

    def handle(self, ctx: HandlerContext) -> HandlerResult:
        state = read_snapshot(ctx.args.file)
        status = TrainingStatus.from_dict(state.get("status", {}))
        log = TrainingLog.from_list(state.get("log", []))
        lines = [
            f"iterations_done: {status.iterations_done}",
            f"epochs_done: {status.epochs_done}",
            f"training_finished: {str(status.training_finished).lower()}",
            f"stop_requested: {str(status.stop_requested).lower()}",
            f"channels: {', '.join(log.channels()) or '(none)'}",
            f"parameters: {', '.join(sorted(state.get('parameters', {}))) or '(none)'}",
            f"extensions: {', '.join(sorted(state.get('extensions', {}))) or '(none)'}",
        ]
        return HandlerResult(output="\n".join(lines))
