"""
Pipeline specs: the serializable description of a stream chain.

A spec is plain JSON, so it can cross a process boundary (the batch
server builds its pipeline from one) and be stored next to a checkpoint.

    {
      "container": "blobs.bfdc",
      "split": "train",
      "backend": "in_memory",
      "scheme": {"kind": "shuffled", "batch_size": 1, "seed": 3, "examplewise": true},
      "num_epochs": null,
      "transformers": [
        {"kind": "batch", "size": 16, "policy": "keep"},
        {"kind": "mapping", "function": "scale_by", "params": {"factor": 0.5}}
      ]
    }
"""

import json
from pathlib import Path
from typing import Any, Dict, Optional, Union

from core.context import Backend, BatchPolicy
from core.dataset import Dataset
from core.errors import KilnError, SpecError
from core.iteration import (
    BootstrapScheme,
    IterationScheme,
    SequentialScheme,
    ShuffledScheme,
)
from core.stream import Batch, DataStream, Mapping, NGrams, Padding, RandomCrop, Stream
from core.structured_logging import get_logger

logger = get_logger(__name__)

PipelineSpec = Dict[str, Any]


def load_pipeline_spec(path: Union[str, Path]) -> PipelineSpec:
    """
    Read a spec file. A relative container path is resolved against the
    spec file's directory.
    """
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise SpecError(f"cannot read pipeline spec {path}: {e}") from e
    if not isinstance(spec, dict):
        raise SpecError(f"pipeline spec {path} must be a JSON object")
    container = spec.get("container")
    if isinstance(container, str) and not Path(container).is_absolute():
        spec["container"] = str(path.parent / container)
    return spec


def _require(spec: Dict[str, Any], key: str, where: str) -> Any:
    if key not in spec:
        raise SpecError(f"{where} is missing {key!r}")
    return spec[key]


def build_scheme(scheme_spec: Dict[str, Any], num_examples: int) -> IterationScheme:
    kind = _require(scheme_spec, "kind", "scheme spec")
    batch_size = int(scheme_spec.get("batch_size", 1))
    policy = BatchPolicy(scheme_spec.get("policy", BatchPolicy.KEEP.value))
    examplewise = bool(scheme_spec.get("examplewise", False))
    indices = scheme_spec.get("indices")

    if kind == SequentialScheme.kind:
        return SequentialScheme(num_examples, batch_size, policy=policy, indices=indices, examplewise=examplewise)
    if kind == ShuffledScheme.kind:
        seed = int(_require(scheme_spec, "seed", "shuffled scheme spec"))
        return ShuffledScheme(num_examples, batch_size, seed, policy=policy, indices=indices, examplewise=examplewise)
    if kind == BootstrapScheme.kind:
        seed = int(_require(scheme_spec, "seed", "bootstrap scheme spec"))
        return BootstrapScheme(num_examples, batch_size, seed, policy=policy, indices=indices, examplewise=examplewise)
    raise SpecError(f"unknown scheme kind {kind!r}")


def _wrap(stream: Stream, layer: Dict[str, Any]) -> Stream:
    kind = _require(layer, "kind", "transformer spec")
    if kind == Mapping.kind:
        return Mapping(stream, _require(layer, "function", "mapping spec"), layer.get("params"))
    if kind == Batch.kind:
        return Batch(
            stream,
            int(_require(layer, "size", "batch spec")),
            BatchPolicy(layer.get("policy", BatchPolicy.KEEP.value)),
            layer.get("ragged", ()),
        )
    if kind == Padding.kind:
        return Padding(stream, layer.get("pad_value", 0), layer.get("exempt", ()))
    if kind == NGrams.kind:
        return NGrams(stream, int(_require(layer, "n", "ngrams spec")), layer.get("source", "tokens"))
    if kind == RandomCrop.kind:
        return RandomCrop(
            stream,
            int(_require(layer, "crop_h", "random_crop spec")),
            int(_require(layer, "crop_w", "random_crop spec")),
            int(_require(layer, "seed", "random_crop spec")),
            layer.get("source", "features"),
            layer.get("layout", "hw"),
        )
    raise SpecError(f"unknown transformer kind {kind!r}")


def build_pipeline(spec: PipelineSpec, container: Optional[Union[str, Path]] = None) -> Stream:
    """
    Build a live stream chain from a spec.

    Args:
        spec: Pipeline spec (see module docstring)
        container: Overrides spec["container"]

    Raises:
        SpecError: malformed spec
        KilnError: container/dataset/stream construction failures
    """
    path = container if container is not None else _require(spec, "container", "pipeline spec")
    split = _require(spec, "split", "pipeline spec")
    try:
        backend = Backend(spec.get("backend", Backend.IN_MEMORY.value))
    except ValueError as e:
        raise SpecError(f"unknown backend {spec.get('backend')!r}") from e

    dataset = Dataset.open(path, split, backend)
    try:
        scheme = build_scheme(_require(spec, "scheme", "pipeline spec"), dataset.num_examples)
        stream: Stream = DataStream(dataset, scheme, spec.get("num_epochs"))
        for layer in spec.get("transformers", []):
            stream = _wrap(stream, layer)
    except KilnError:
        raise
    except (TypeError, ValueError) as e:
        raise SpecError(f"malformed pipeline spec: {e}") from e

    logger.debug(
        f"Built pipeline over {split} with {len(spec.get('transformers', []))} transformers",
        extra={"event": "pipeline_built", "path": str(path), "split": split},
    )
    return stream
