"""
Chainable data streams.

A DataStream pulls index requests from an iteration scheme and fetches the
rows from a Dataset. Transformers wrap another stream and preprocess its
items on the fly. Every layer saves and restores its own state, and the
whole chain serializes as a JSON tree (StreamState), so a restored pipeline
emits exactly the items an uninterrupted one would.

Usage:
    stream = data_stream(train, shuffled_examples(train.num_examples, seed=3))
    stream = batch(stream, 32, BatchPolicy.KEEP)
    stream = mapping(stream, "scale_by", {"factor": 0.5, "sources": ["features"]})
    item = stream.get_next()   # dict, or StreamSignal.EPOCH_END / EXHAUSTED
"""

import inspect
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from core.binary import dtype_info, dtype_name_of
from core.context import BatchPolicy, StreamSignal
from core.dataset import Dataset
from core.errors import StateMismatchError, StreamError, UnknownMappingError
from core.iteration import IterationScheme, SchemeState
from core.rng import Rng
from core.structured_logging import get_logger

logger = get_logger(__name__)

Item = Dict[str, Any]
Pull = Union[Item, StreamSignal]


@dataclass
class StreamState:
    """
    Saved state of one layer and, recursively, of the layers below it.

    Attributes:
        kind: Layer kind tag; must match the layer that loads it
        state: JSON-compatible layer state
        child: State of the wrapped stream (None for a data stream)
    """
    kind: str
    state: Dict[str, Any] = field(default_factory=dict)
    child: Optional["StreamState"] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "state": self.state,
            "child": self.child.to_dict() if self.child is not None else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StreamState":
        if not isinstance(data, dict) or "kind" not in data:
            raise StateMismatchError("malformed stream state: missing layer kind")
        child = data.get("child")
        return cls(
            kind=str(data["kind"]),
            state=dict(data.get("state") or {}),
            child=cls.from_dict(child) if child is not None else None,
        )

    def kinds(self) -> List[str]:
        """Layer kinds from the outermost layer down."""
        chain = [self.kind]
        if self.child is not None:
            chain.extend(self.child.kinds())
        return chain


class Stream(ABC):
    """Common interface of data streams and transformers."""

    kind: str = ""

    @property
    @abstractmethod
    def sources(self) -> List[str]:
        """Names of the sources in each emitted item, in order."""

    @abstractmethod
    def get_next(self) -> Pull:
        """Next item, or an EPOCH_END / EXHAUSTED signal."""

    @abstractmethod
    def _state(self) -> Dict[str, Any]:
        ...

    @abstractmethod
    def _load(self, state: Dict[str, Any]) -> None:
        ...

    @abstractmethod
    def _config(self) -> Dict[str, Any]:
        ...

    @property
    def child(self) -> Optional["Stream"]:
        return None

    def save_state(self) -> StreamState:
        child = self.child
        return StreamState(
            kind=self.kind,
            state=self._state(),
            child=child.save_state() if child is not None else None,
        )

    def load_state(self, state: StreamState) -> None:
        """
        Restore this chain from a state saved by an identically built chain.

        Raises:
            StateMismatchError: layer kinds or depth differ
        """
        if state.kind != self.kind:
            raise StateMismatchError(f"cannot restore {state.kind!r} state into a {self.kind!r} layer")
        child = self.child
        if (child is None) != (state.child is None):
            raise StateMismatchError(f"pipeline depth differs at {self.kind!r} layer")
        if child is not None:
            child.load_state(state.child)
        try:
            self._load(state.state)
        except (KeyError, TypeError, ValueError) as e:
            raise StateMismatchError(f"malformed {self.kind!r} state: {e}") from e

    def describe(self) -> Dict[str, Any]:
        """Configuration of the chain (no position), outermost layer first."""
        child = self.child
        description = {"kind": self.kind, **self._config()}
        if child is not None:
            description["child"] = child.describe()
        return description

    def next_epoch(self) -> List[Item]:
        """Items up to the next EPOCH_END (or exhaustion)."""
        items = []
        while True:
            pulled = self.get_next()
            if isinstance(pulled, StreamSignal):
                return items
            items.append(pulled)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(sources={self.sources})"


# =============================================================================
# Data stream
# =============================================================================

class DataStream(Stream):
    """
    Base stream over one dataset split.

    With num_epochs set, the stream reports EXHAUSTED after that many
    epoch-end signals; otherwise it runs forever.
    """

    kind = "data_stream"

    def __init__(self, dataset: Dataset, scheme: IterationScheme, num_epochs: Optional[int] = None):
        if scheme.num_examples != dataset.num_examples:
            raise StreamError(
                f"scheme covers {scheme.num_examples} examples, "
                f"dataset split {dataset.split!r} has {dataset.num_examples}"
            )
        if num_epochs is not None and num_epochs < 1:
            raise StreamError(f"num_epochs must be >= 1, got {num_epochs}")
        self.dataset = dataset
        self.scheme = scheme
        self.num_epochs = num_epochs
        self.epochs_done = 0

    @property
    def sources(self) -> List[str]:
        return list(self.dataset.sources)

    def get_next(self) -> Pull:
        if self.num_epochs is not None and self.epochs_done >= self.num_epochs:
            return StreamSignal.EXHAUSTED
        request = self.scheme.next_request()
        if request is StreamSignal.EPOCH_END:
            self.epochs_done += 1
            return StreamSignal.EPOCH_END
        if isinstance(request, int):
            rows = self.dataset.get_examples([request])
            return {name: rows[name][0] for name in self.sources}
        return self.dataset.get_examples(request)

    def _state(self) -> Dict[str, Any]:
        return {"scheme": self.scheme.save_state().to_dict(), "epochs_done": self.epochs_done}

    def _load(self, state: Dict[str, Any]) -> None:
        self.scheme.load_state(SchemeState.from_dict(state["scheme"]))
        self.epochs_done = int(state["epochs_done"])

    def _config(self) -> Dict[str, Any]:
        return {
            "container": str(self.dataset.path),
            "split": self.dataset.split,
            "backend": self.dataset.backend.value,
            "scheme": self.scheme.describe(),
            "num_epochs": self.num_epochs,
        }


class Transformer(Stream):
    """A stream that wraps another stream."""

    def __init__(self, stream: Stream):
        self.stream = stream

    @property
    def child(self) -> Optional[Stream]:
        return self.stream

    @property
    def sources(self) -> List[str]:
        return self.stream.sources

    def _state(self) -> Dict[str, Any]:
        return {}

    def _load(self, state: Dict[str, Any]) -> None:
        pass


# =============================================================================
# Mapping registry
# =============================================================================

@dataclass(frozen=True)
class MappingFunction:
    """
    A named pure function over items.

    Attributes:
        name: Registry id
        apply: fn(item, **params) -> item
        output_sources: fn(sources, **params) -> sources produced
    """
    name: str
    apply: Callable[..., Item]
    output_sources: Callable[..., List[str]]


MAPPINGS: Dict[str, MappingFunction] = {}


def _same_sources(sources: List[str], /, **params: Any) -> List[str]:
    return list(sources)


def register_mapping(name: str, output_sources: Callable[..., List[str]] = _same_sources):
    """Decorator adding a function to the mapping registry under name."""
    def decorator(func: Callable[..., Item]) -> Callable[..., Item]:
        if name in MAPPINGS:
            raise StreamError(f"mapping {name!r} registered twice")
        MAPPINGS[name] = MappingFunction(name, func, output_sources)
        return func
    return decorator


def _targets(item: Item, sources: Optional[Sequence[str]]) -> List[str]:
    if sources is None:
        return [name for name, value in item.items()
                if isinstance(value, np.ndarray) and value.dtype.kind == "f"]
    missing = [name for name in sources if name not in item]
    if missing:
        raise StreamError(f"item has no sources {missing}")
    return list(sources)


@register_mapping("scale_by")
def scale_by(item: Item, factor: float, sources: Optional[List[str]] = None) -> Item:
    """Multiply the listed sources (default: all floating sources) by factor."""
    out = dict(item)
    for name in _targets(item, sources):
        out[name] = item[name] * factor
    return out


@register_mapping("shift_by")
def shift_by(item: Item, offset: float, sources: Optional[List[str]] = None) -> Item:
    out = dict(item)
    for name in _targets(item, sources):
        out[name] = item[name] + offset
    return out


@register_mapping("cast_to")
def cast_to(item: Item, dtype: str, sources: Optional[List[str]] = None) -> Item:
    target = dtype_info(dtype).numpy.newbyteorder("=")
    out = dict(item)
    for name in (sources if sources is not None else list(item)):
        if name not in item:
            raise StreamError(f"item has no source {name!r}")
        out[name] = np.asarray(item[name]).astype(target)
    return out


def _selected_sources(sources: List[str], keep: List[str]) -> List[str]:
    return [name for name in sources if name in keep]


@register_mapping("select_sources", output_sources=_selected_sources)
def select_sources(item: Item, keep: List[str]) -> Item:
    missing = [name for name in keep if name not in item]
    if missing:
        raise StreamError(f"cannot select missing sources {missing}")
    return {name: value for name, value in item.items() if name in keep}


@register_mapping("one_hot")
def one_hot(item: Item, source: str, num_classes: int, flatten: bool = True) -> Item:
    """
    Integer labels to float64 one-hot rows.

    With flatten set, labels shaped [..., 1] lose the trailing axis first and
    a batch of label rows [B, n] becomes [B, n * num_classes].
    """
    labels = np.asarray(item[source])
    if flatten and labels.ndim >= 1 and labels.shape[-1] == 1:
        labels = labels[..., 0]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise StreamError(f"labels of {source!r} outside [0, {num_classes})")
    encoded = np.eye(num_classes, dtype=np.float64)[labels.astype(np.int64)]
    if flatten and encoded.ndim > 2:
        encoded = encoded.reshape(encoded.shape[0], -1)
    out = dict(item)
    out[source] = encoded
    return out


@register_mapping("trim_to_length")
def trim_to_length(item: Item, source: str, length_source: str) -> Item:
    """Cut a padded example row down to its real length."""
    row = np.asarray(item[source])
    length = np.asarray(item[length_source]).reshape(-1)
    if row.ndim != 1 or length.size != 1:
        raise StreamError("trim_to_length works on single examples (1-D rows, one length)")
    n = int(length[0])
    if not 0 <= n <= row.shape[0]:
        raise StreamError(f"length {n} outside [0, {row.shape[0]}]")
    out = dict(item)
    out[source] = row[:n].copy()
    return out


class Mapping(Transformer):
    kind = "mapping"

    def __init__(self, stream: Stream, function_id: str, params: Optional[Dict[str, Any]] = None):
        super().__init__(stream)
        if function_id not in MAPPINGS:
            raise UnknownMappingError(f"unknown mapping {function_id!r}; have {sorted(MAPPINGS)}")
        self.function = MAPPINGS[function_id]
        self.function_id = function_id
        self.params = dict(params or {})
        try:
            inspect.signature(self.function.apply).bind({}, **self.params)
        except TypeError as e:
            raise StreamError(f"bad parameters for mapping {function_id!r}: {e}") from e

    @property
    def sources(self) -> List[str]:
        return self.function.output_sources(self.stream.sources, **self.params)

    def get_next(self) -> Pull:
        pulled = self.stream.get_next()
        if isinstance(pulled, StreamSignal):
            return pulled
        return self.function.apply(pulled, **self.params)

    def _config(self) -> Dict[str, Any]:
        return {"function": self.function_id, "params": self.params}


# =============================================================================
# Batching and padding
# =============================================================================

class Batch(Transformer):
    """
    Groups consecutive single examples into batches.

    Sources listed in ragged are collected into lists of arrays instead of
    being stacked (for a downstream Padding).
    """

    kind = "batch"

    def __init__(
        self,
        stream: Stream,
        size: int,
        policy: BatchPolicy = BatchPolicy.KEEP,
        ragged: Sequence[str] = (),
    ):
        super().__init__(stream)
        if size < 1:
            raise StreamError(f"batch size must be >= 1, got {size}")
        self.size = size
        self.policy = policy
        self.ragged = list(ragged)
        self._pending_epoch_end = False

    def get_next(self) -> Pull:
        while True:
            if self._pending_epoch_end:
                self._pending_epoch_end = False
                return StreamSignal.EPOCH_END

            examples: List[Item] = []
            ended: Optional[StreamSignal] = None
            while len(examples) < self.size:
                pulled = self.stream.get_next()
                if isinstance(pulled, StreamSignal):
                    ended = pulled
                    break
                examples.append(pulled)

            if not examples:
                return ended
            if ended is StreamSignal.EPOCH_END:
                self._pending_epoch_end = True
            if len(examples) < self.size and self.policy is BatchPolicy.DROP:
                if ended is StreamSignal.EXHAUSTED:
                    return StreamSignal.EXHAUSTED
                continue
            return self._stack(examples)

    def _stack(self, examples: List[Item]) -> Item:
        batch: Item = {}
        for name in examples[0]:
            values = [example[name] for example in examples]
            if name in self.ragged:
                batch[name] = [np.asarray(v) for v in values]
                continue
            shapes = {np.shape(v) for v in values}
            if len(shapes) > 1:
                raise StreamError(f"source {name!r} has inconsistent example shapes {sorted(shapes)}")
            batch[name] = np.stack([np.asarray(v) for v in values])
        return batch

    def _state(self) -> Dict[str, Any]:
        return {"pending_epoch_end": self._pending_epoch_end}

    def _load(self, state: Dict[str, Any]) -> None:
        self._pending_epoch_end = bool(state["pending_epoch_end"])

    def _config(self) -> Dict[str, Any]:
        return {"size": self.size, "policy": self.policy.value, "ragged": self.ragged}


class Padding(Transformer):
    """
    Pads variable-length sequences in a batch to the batch maximum.

    Each padded source gets a companion "<name>_mask" source, float64 of
    shape [batch, max_length], with 1.0 over real entries.
    """

    kind = "padding"

    def __init__(self, stream: Stream, pad_value: float = 0, exempt: Sequence[str] = ()):
        super().__init__(stream)
        self.pad_value = pad_value
        self.exempt = list(exempt)

    @property
    def sources(self) -> List[str]:
        names = []
        for name in self.stream.sources:
            names.append(name)
            if name not in self.exempt:
                names.append(f"{name}_mask")
        return names

    def get_next(self) -> Pull:
        pulled = self.stream.get_next()
        if isinstance(pulled, StreamSignal):
            return pulled
        out: Item = {}
        for name, value in pulled.items():
            out[name] = value
            if name in self.exempt:
                continue
            out[name], out[f"{name}_mask"] = self._pad(name, value)
        return out

    def _pad(self, name: str, value: Any) -> tuple:
        sequences = [np.asarray(v) for v in value]
        if any(s.ndim == 0 for s in sequences):
            raise StreamError(f"source {name!r} is not a sequence source; list it in exempt")
        if not sequences:
            dtype = value.dtype if isinstance(value, np.ndarray) else np.float64
            return np.zeros((0, 0), dtype=dtype), np.zeros((0, 0), dtype=np.float64)

        trailing = {s.shape[1:] for s in sequences}
        if len(trailing) > 1:
            raise StreamError(f"sequences of {name!r} disagree on trailing shape")
        max_length = max(s.shape[0] for s in sequences)
        padded = np.full(
            (len(sequences), max_length) + sequences[0].shape[1:],
            self.pad_value,
            dtype=sequences[0].dtype,
        )
        mask = np.zeros((len(sequences), max_length), dtype=np.float64)
        for i, sequence in enumerate(sequences):
            padded[i, : sequence.shape[0]] = sequence
            mask[i, : sequence.shape[0]] = 1.0
        return padded, mask

    def _config(self) -> Dict[str, Any]:
        return {"pad_value": self.pad_value, "exempt": self.exempt}


# =============================================================================
# N-grams
# =============================================================================

class NGrams(Transformer):
    """
    Sliding (context, target) windows over token sequences.

    A sequence of length L emits L-n items: context = tokens [i, i+n) under
    the token source, target = token i+n under "targets" (shape [1]).
    Only the sequence in progress is buffered.
    """

    kind = "ngrams"
    TARGET_SOURCE = "targets"

    def __init__(self, stream: Stream, n: int, source: str = "tokens"):
        super().__init__(stream)
        if n < 1:
            raise StreamError(f"ngram order must be >= 1, got {n}")
        if source not in stream.sources:
            raise StreamError(f"upstream has no source {source!r}")
        self.n = n
        self.source = source
        self._sequence: Optional[np.ndarray] = None
        self._position = 0

    @property
    def sources(self) -> List[str]:
        return [self.source, self.TARGET_SOURCE]

    def get_next(self) -> Pull:
        while True:
            sequence = self._sequence
            if sequence is not None and self._position + self.n < sequence.shape[0]:
                i = self._position
                self._position += 1
                return {
                    self.source: sequence[i : i + self.n].copy(),
                    self.TARGET_SOURCE: sequence[i + self.n : i + self.n + 1].copy(),
                }
            self._sequence = None
            self._position = 0

            pulled = self.stream.get_next()
            if isinstance(pulled, StreamSignal):
                return pulled
            tokens = np.asarray(pulled[self.source])
            if tokens.ndim != 1:
                raise StreamError(f"ngrams expects 1-D token sequences, got shape {tokens.shape}")
            self._sequence = tokens

    def _state(self) -> Dict[str, Any]:
        if self._sequence is None:
            return {"sequence": None, "dtype": None, "position": 0}
        return {
            "sequence": self._sequence.tolist(),
            "dtype": dtype_name_of(self._sequence),
            "position": self._position,
        }

    def _load(self, state: Dict[str, Any]) -> None:
        if state["sequence"] is None:
            self._sequence = None
        else:
            numpy_dtype = dtype_info(state["dtype"]).numpy.newbyteorder("=")
            self._sequence = np.asarray(state["sequence"], dtype=numpy_dtype)
        self._position = int(state["position"])

    def _config(self) -> Dict[str, Any]:
        return {"n": self.n, "source": self.source}


# =============================================================================
# Random crop
# =============================================================================

class RandomCrop(Transformer):
    """
    Random (crop_h, crop_w) window of an image source.

    Works on single examples and on batches; every example draws its top
    offset, then its left offset, from the transformer's own generator.
    layout is "hw" or "hwc" (trailing image axes).
    """

    kind = "random_crop"
    LAYOUTS = {"hw": 2, "hwc": 3}

    def __init__(
        self,
        stream: Stream,
        crop_h: int,
        crop_w: int,
        seed: int,
        source: str = "features",
        layout: str = "hw",
    ):
        super().__init__(stream)
        if layout not in self.LAYOUTS:
            raise StreamError(f"layout must be one of {sorted(self.LAYOUTS)}, got {layout!r}")
        if crop_h < 1 or crop_w < 1:
            raise StreamError(f"crop must be at least 1x1, got {crop_h}x{crop_w}")
        self.crop_h = crop_h
        self.crop_w = crop_w
        self.seed = seed
        self.source = source
        self.layout = layout
        self.rng = Rng.from_seed(seed)

    def _crop(self, image: np.ndarray) -> np.ndarray:
        height, width = image.shape[0], image.shape[1]
        if self.crop_h > height or self.crop_w > width:
            raise StreamError(
                f"crop {self.crop_h}x{self.crop_w} larger than image {height}x{width}"
            )
        top = self.rng.bounded(height - self.crop_h + 1)
        left = self.rng.bounded(width - self.crop_w + 1)
        return image[top : top + self.crop_h, left : left + self.crop_w].copy()

    def get_next(self) -> Pull:
        pulled = self.stream.get_next()
        if isinstance(pulled, StreamSignal):
            return pulled
        images = np.asarray(pulled[self.source])
        image_ndim = self.LAYOUTS[self.layout]
        out = dict(pulled)
        if images.ndim == image_ndim:
            out[self.source] = self._crop(images)
        elif images.ndim == image_ndim + 1:
            crops = [self._crop(image) for image in images]
            out[self.source] = (
                np.stack(crops) if crops
                else np.zeros((0, self.crop_h, self.crop_w) + images.shape[3:], dtype=images.dtype)
            )
        else:
            raise StreamError(
                f"source {self.source!r} has shape {images.shape}, not a {self.layout} image or batch"
            )
        return out

    def _state(self) -> Dict[str, Any]:
        return {"rng": self.rng.state_dict()}

    def _load(self, state: Dict[str, Any]) -> None:
        self.rng = Rng.from_state_dict(state["rng"])

    def _config(self) -> Dict[str, Any]:
        return {
            "crop_h": self.crop_h,
            "crop_w": self.crop_w,
            "seed": self.seed,
            "source": self.source,
            "layout": self.layout,
        }


# =============================================================================
# Constructors
# =============================================================================

def data_stream(dataset: Dataset, scheme: IterationScheme, num_epochs: Optional[int] = None) -> DataStream:
    return DataStream(dataset, scheme, num_epochs)


def mapping(stream: Stream, function_id: str, params: Optional[Dict[str, Any]] = None) -> Mapping:
    return Mapping(stream, function_id, params)


def batch(
    stream: Stream, size: int, policy: BatchPolicy = BatchPolicy.KEEP, ragged: Sequence[str] = ()
) -> Batch:
    return Batch(stream, size, policy, ragged)


def padding(stream: Stream, pad_value: float = 0, exempt: Sequence[str] = ()) -> Padding:
    return Padding(stream, pad_value, exempt)


def ngrams(stream: Stream, n: int, source: str = "tokens") -> NGrams:
    return NGrams(stream, n, source)


def random_crop(
    stream: Stream, crop_h: int, crop_w: int, seed: int, source: str = "features", layout: str = "hw"
) -> RandomCrop:
    return RandomCrop(stream, crop_h, crop_w, seed, source, layout)


def save_state(stream: Stream) -> StreamState:
    return stream.save_state()


def restore_state(stream: Stream, state: Union[StreamState, Dict[str, Any]]) -> Stream:
    """
    Load a saved state tree into a freshly built pipeline and return it.

    Raises:
        StateMismatchError: the tree does not fit the pipeline's layers
    """
    if isinstance(state, dict):
        state = StreamState.from_dict(state)
    stream.load_state(state)
    logger.debug(
        f"Restored stream state ({' > '.join(state.kinds())})",
        extra={"event": "stream_restored"},
    )
    return stream
