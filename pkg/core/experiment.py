"""
Demo training experiments built from a JSON training spec.

    {
      "container": "blobs.bfdc",
      "output_dir": "run",
      "seed": 1,
      "train": {"split": "train", "scheme": {"kind": "shuffled", "batch_size": 16, "seed": 7}},
      "valid": {"split": "test", "scheme": {"kind": "sequential", "batch_size": 40}},
      "model": {
        "input": "features", "target": "targets",
        "dims": [2, 8, 2], "activations": ["tanh", "softmax"],
        "weights_init": {"kind": "gaussian", "std": 0.1},
        "biases_init": {"kind": "constant", "value": 0.0},
        "weight_decay": 0.0, "weight_norm": null,
        "dropout": {"p": 0.5, "seed": 3}
      },
      "rule_chain": [{"kind": "adam"}],
      "extensions": {
        "finish_after": {"epochs": 5},
        "printing": {"every_n": null},
        "log_to_file": {"path": "log.jsonl"},
        "checkpoint": {"path": "checkpoint.bfck", "every_n_iterations": 10},
        "learning_rate_schedule": {"rule_index": 0, "factor": 0.5, "every_n_epochs": 2}
      }
    }

"train" and "valid" are pipeline specs without the container. Relative
container and output paths are resolved against the spec file; extension
paths against output_dir. The model is an MLP ending in softmax, trained
with cross-entropy (plus an optional L2 penalty on the weights). "dropout"
masks the hidden activations of the training graph only; validation
monitors the clean cost and error rate.
"""

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from core import graph
from core.bricks import MLP, init_scheme_from_spec, initialize
from core.errors import KilnError, SpecError
from core.extensions import (
    Checkpoint,
    DataStreamMonitoring,
    Extension,
    FinishAfter,
    LearningRateSchedule,
    LogToFile,
    Printing,
)
from core.graph import Role, Variable, variable_filter
from core.mainloop import MainLoop
from core.pipeline import build_pipeline
from core.rng import Rng
from core.steprules import WeightNormConstraint, rule_from_spec
from core.structured_logging import get_logger

logger = get_logger(__name__)

TrainSpec = Dict[str, Any]

DEFAULT_WEIGHTS_INIT = {"kind": "gaussian", "std": 0.1}
DEFAULT_BIASES_INIT = {"kind": "constant", "value": 0.0}


def load_train_spec(path: Union[str, Path]) -> TrainSpec:
    """Read a training spec and resolve its relative paths against the file's directory."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise SpecError(f"cannot read training spec {path}: {e}") from e
    if not isinstance(spec, dict):
        raise SpecError(f"training spec {path} must be a JSON object")
    for key in ("container", "output_dir"):
        value = spec.get(key)
        if isinstance(value, str) and not Path(value).is_absolute():
            spec[key] = str(path.parent / value)
    return spec


@dataclass
class Experiment:
    """A built demo experiment: model, cost graph and main loop."""
    spec: TrainSpec
    model: MLP
    probabilities: Variable
    cost: Variable
    error_rate: Variable
    main_loop: MainLoop

    def run(self):
        return self.main_loop.run()


def _section(spec: TrainSpec, key: str) -> Dict[str, Any]:
    value = spec.get(key)
    if not isinstance(value, dict):
        raise SpecError(f"training spec needs a {key!r} object")
    return value


def _pipeline(spec: TrainSpec, key: str) -> Dict[str, Any]:
    return {"container": spec["container"], **_section(spec, key)}


def _build_model(model_spec: Dict[str, Any], seed: int):
    dims = model_spec.get("dims")
    activations = model_spec.get("activations")
    if not isinstance(dims, list) or not isinstance(activations, list):
        raise SpecError("model needs 'dims' and 'activations' lists")
    if activations[-1:] != ["softmax"]:
        raise SpecError("the demo model is a classifier: its last activation must be 'softmax'")

    model = MLP("mlp", dims, activations)
    model.allocate()
    initialize(
        model,
        init_scheme_from_spec(model_spec.get("weights_init", DEFAULT_WEIGHTS_INIT)),
        init_scheme_from_spec(model_spec.get("biases_init", DEFAULT_BIASES_INIT)),
        rng=Rng.from_seed(seed),
    )

    x = graph.input(model_spec.get("input", "features"), [None, dims[0]])
    y = graph.input(model_spec.get("target", "targets"), [None, 1])
    probs = model.apply(x)
    cost = graph.cross_entropy(probs, y)
    cost.name = "cost"
    error = graph.error_rate(probs, y)
    error.name = "error_rate"

    train_cost = cost
    dropout = model_spec.get("dropout")
    if dropout:
        cg = graph.ComputationGraph([cost])
        hidden = [
            var
            for brick in model.activation_bricks[:-1]
            for var in variable_filter(cg, roles=[Role.OUTPUT], brick_name=brick.name)
        ]
        train_cost = graph.apply_dropout(cg, hidden, float(dropout["p"]), int(dropout.get("seed", seed))).outputs[0]
    decay = float(model_spec.get("weight_decay", 0.0))
    if decay:
        weights = variable_filter(graph.ComputationGraph([cost]), roles=[Role.WEIGHT])
        train_cost = graph.add(train_cost, graph.l2_penalty(weights, decay))
        train_cost.name = "regularized_cost"
        train_cost.add_role(Role.COST)
    return model, probs, cost, error, train_cost


def _extensions(spec: TrainSpec, valid_stream, channels: List[Variable]) -> List[Extension]:
    config = spec.get("extensions", {})
    output_dir = Path(spec.get("output_dir", "."))
    extensions: List[Extension] = []

    if valid_stream is not None:
        extensions.append(DataStreamMonitoring(valid_stream, channels))
    if "learning_rate_schedule" in config:
        extensions.append(LearningRateSchedule(**config["learning_rate_schedule"]))
    if "finish_after" in config:
        extensions.append(FinishAfter(**config["finish_after"]))
    if "checkpoint" in config:
        options = dict(config["checkpoint"])
        options["path"] = str(output_dir / options.pop("path", "checkpoint.bfck"))
        extensions.append(Checkpoint(**options))
    if "log_to_file" in config:
        extensions.append(LogToFile(output_dir / config["log_to_file"].get("path", "log.jsonl")))
    if "printing" in config:
        extensions.append(Printing(**(config["printing"] or {})))
    return extensions


def build_experiment(spec: TrainSpec) -> Experiment:
    """
    Build model, streams and main loop from a training spec.

    Variable ids restart for every build, so two builds of the same
    spec produce identical graphs (and identical snapshot integrity data).

    Raises:
        SpecError: malformed spec
        KilnError: dataset, stream or graph construction failures
    """
    if "container" not in spec:
        raise SpecError("training spec is missing 'container'")
    seed = int(spec.get("seed", 0))
    try:
        with graph.id_scope():
            model, probs, cost, error, train_cost = _build_model(_section(spec, "model"), seed)
            train_stream = build_pipeline(_pipeline(spec, "train"))
            valid_stream = build_pipeline(_pipeline(spec, "valid")) if "valid" in spec else None
            rules = [rule_from_spec(rule) for rule in spec.get("rule_chain", [{"kind": "scale"}])]
            limit = _section(spec, "model").get("weight_norm")
            constraints = [WeightNormConstraint(float(limit))] if limit else []
            main_loop = MainLoop(
                train_cost,
                train_stream,
                step_rules=rules,
                extensions=_extensions(spec, valid_stream, [cost, error]),
                constraints=constraints,
                metadata={"train_spec": spec},
            )
    except KilnError:
        raise
    except (TypeError, ValueError, KeyError) as e:
        raise SpecError(f"malformed training spec: {e}") from e

    logger.info(
        f"Experiment built: dims {model.dims}, {len(rules)} step rules, "
        f"{len(main_loop.extensions)} extensions",
        extra={"event": "experiment_built"},
    )
    return Experiment(spec, model, probs, cost, error, main_loop)


def run_experiment(spec: TrainSpec, resume_from: Optional[Union[str, Path]] = None) -> Experiment:
    """Build, optionally restore from a snapshot, and train."""
    experiment = build_experiment(spec)
    if resume_from is not None:
        experiment.main_loop.load_snapshot(resume_from)
    experiment.run()
    return experiment
