"""
Iteration schemes: deterministic, serializable producers of index requests.

A scheme runs forever as a sequence of epochs. Each call to next_request()
returns the next batch of indices (a single int for example-wise schemes)
or StreamSignal.EPOCH_END between epochs. The complete position, including
the materialized epoch order and the generator, lives in a SchemeState, so
a restored scheme continues exactly where the saved one stopped.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Type, Union

from core.context import BatchPolicy, StreamSignal
from core.errors import SchemeError
from core.rng import Rng

Request = Union[List[int], int, StreamSignal]


def _policy(value: str) -> BatchPolicy:
    try:
        return BatchPolicy(value)
    except ValueError as e:
        raise SchemeError(f"unknown last batch policy {value!r}") from e


@dataclass
class SchemeState:
    """
    Serializable position of a scheme.

    Attributes:
        kind: Scheme kind tag
        num_examples: Size of the index space
        batch_size: Requested batch size (1 for example-wise schemes)
        cursor: Next position within the current epoch order
        epoch_order: Materialized order of the epoch in progress (None when implicit)
        in_epoch: Whether an epoch is in progress
        rng: Generator state (stochastic schemes only)
        last_batch_policy: "keep" or "drop"
        indices: Explicit index list the scheme walks (None = range(num_examples))
        examplewise: Requests are single indices instead of lists
        seed: Seed the scheme was built with (configuration, not position)
    """
    kind: str
    num_examples: int
    batch_size: int
    cursor: int = 0
    epoch_order: Optional[List[int]] = None
    in_epoch: bool = False
    rng: Optional[Dict[str, Any]] = None
    last_batch_policy: str = BatchPolicy.KEEP.value
    indices: Optional[List[int]] = None
    examplewise: bool = False
    seed: Optional[int] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "num_examples": self.num_examples,
            "batch_size": self.batch_size,
            "cursor": self.cursor,
            "epoch_order": list(self.epoch_order) if self.epoch_order is not None else None,
            "in_epoch": self.in_epoch,
            "rng": dict(self.rng) if self.rng is not None else None,
            "last_batch_policy": self.last_batch_policy,
            "indices": list(self.indices) if self.indices is not None else None,
            "examplewise": self.examplewise,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SchemeState":
        try:
            return cls(
                kind=str(data["kind"]),
                num_examples=int(data["num_examples"]),
                batch_size=int(data["batch_size"]),
                cursor=int(data["cursor"]),
                epoch_order=list(data["epoch_order"]) if data.get("epoch_order") is not None else None,
                in_epoch=bool(data["in_epoch"]),
                rng=data.get("rng"),
                last_batch_policy=str(data.get("last_batch_policy", BatchPolicy.KEEP.value)),
                indices=list(data["indices"]) if data.get("indices") is not None else None,
                examplewise=bool(data.get("examplewise", False)),
                seed=data.get("seed"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise SchemeError(f"malformed scheme state: {e}") from e


class IterationScheme(ABC):
    """Base class: epoch bookkeeping shared by every scheme kind."""

    kind: str = ""

    def __init__(
        self,
        num_examples: int,
        batch_size: int,
        policy: BatchPolicy = BatchPolicy.KEEP,
        indices: Optional[Sequence[int]] = None,
        examplewise: bool = False,
    ):
        if num_examples < 0:
            raise SchemeError(f"num_examples must be >= 0, got {num_examples}")
        if batch_size < 1:
            raise SchemeError(f"batch_size must be >= 1, got {batch_size}")
        if indices is not None:
            indices = [int(i) for i in indices]
            if any(not 0 <= i < num_examples for i in indices):
                raise SchemeError(f"explicit indices must lie in [0, {num_examples})")
        self.num_examples = num_examples
        self.batch_size = batch_size
        self.policy = policy
        self.indices = indices
        self.examplewise = examplewise
        self._cursor = 0
        self._order: Optional[List[int]] = None
        self._in_epoch = False

    # -------------------------------------------------------------------------
    # Epochs
    # -------------------------------------------------------------------------

    @property
    def epoch_length(self) -> int:
        """Requests' total index count per epoch."""
        if self._order is not None:
            return len(self._order)
        return len(self.indices) if self.indices is not None else self.num_examples

    @abstractmethod
    def _new_epoch_order(self) -> Optional[List[int]]:
        """Materialized order of a fresh epoch, or None for the identity walk."""

    def _at(self, position: int) -> int:
        if self._order is not None:
            return self._order[position]
        if self.indices is not None:
            return self.indices[position]
        return position

    def next_request(self) -> Request:
        if not self._in_epoch:
            self._order = self._new_epoch_order()
            self._cursor = 0
            self._in_epoch = True

        size = 1 if self.examplewise else self.batch_size
        remaining = self.epoch_length - self._cursor
        if remaining == 0 or (remaining < size and self.policy is BatchPolicy.DROP):
            self._in_epoch = False
            self._order = None
            self._cursor = 0
            return StreamSignal.EPOCH_END

        take = min(size, remaining)
        batch = [self._at(self._cursor + i) for i in range(take)]
        self._cursor += take
        return batch[0] if self.examplewise else batch

    def epoch_requests(self) -> List[Union[List[int], int]]:
        """Requests up to and excluding the next epoch end (convenience for tests/tools)."""
        requests = []
        while True:
            request = self.next_request()
            if request is StreamSignal.EPOCH_END:
                return requests
            requests.append(request)

    # -------------------------------------------------------------------------
    # State
    # -------------------------------------------------------------------------

    def _rng_state(self) -> Optional[Dict[str, Any]]:
        return None

    def _load_rng_state(self, data: Optional[Dict[str, Any]]) -> None:
        pass

    @property
    def seed(self) -> Optional[int]:
        return None

    def save_state(self) -> SchemeState:
        return SchemeState(
            kind=self.kind,
            num_examples=self.num_examples,
            batch_size=self.batch_size,
            cursor=self._cursor,
            epoch_order=list(self._order) if self._order is not None else None,
            in_epoch=self._in_epoch,
            rng=self._rng_state(),
            last_batch_policy=self.policy.value,
            indices=list(self.indices) if self.indices is not None else None,
            examplewise=self.examplewise,
            seed=self.seed,
        )

    def load_state(self, state: SchemeState) -> None:
        """Restore the position saved from a scheme with the same configuration."""
        if state.kind != self.kind:
            raise SchemeError(f"cannot load {state.kind!r} state into a {self.kind!r} scheme")
        if (state.num_examples, state.batch_size) != (self.num_examples, self.batch_size):
            raise SchemeError("scheme state was saved with a different size configuration")
        length = len(state.epoch_order) if state.epoch_order is not None else (
            len(state.indices) if state.indices is not None else state.num_examples
        )
        if not 0 <= state.cursor <= length:
            raise SchemeError(f"cursor {state.cursor} outside [0, {length}]")
        self.indices = list(state.indices) if state.indices is not None else None
        self.policy = _policy(state.last_batch_policy)
        self.examplewise = state.examplewise
        self._cursor = state.cursor
        self._order = list(state.epoch_order) if state.epoch_order is not None else None
        self._in_epoch = state.in_epoch
        self._load_rng_state(state.rng)

    def describe(self) -> Dict[str, Any]:
        """Configuration (not position) of this scheme."""
        return {
            "kind": self.kind,
            "num_examples": self.num_examples,
            "batch_size": self.batch_size,
            "policy": self.policy.value,
            "seed": self.seed,
            "examplewise": self.examplewise,
            "indices": list(self.indices) if self.indices is not None else None,
        }

    def __repr__(self) -> str:
        return f"{type(self).__name__}(n={self.num_examples}, batch_size={self.batch_size})"


class SequentialScheme(IterationScheme):
    """Walks the indices in order: [0..b), [b..2b), ..."""

    kind = "sequential"

    def _new_epoch_order(self) -> Optional[List[int]]:
        return None


class _SeededScheme(IterationScheme):
    def __init__(self, num_examples: int, batch_size: int, seed: int, **kwargs):
        super().__init__(num_examples, batch_size, **kwargs)
        self._seed = seed
        self.rng = Rng.from_seed(seed)

    @property
    def seed(self) -> Optional[int]:
        return self._seed

    def _rng_state(self) -> Optional[Dict[str, Any]]:
        return self.rng.state_dict()

    def _load_rng_state(self, data: Optional[Dict[str, Any]]) -> None:
        if data is None:
            raise SchemeError(f"{self.kind} state has no generator")
        self.rng = Rng.from_state_dict(data)


class ShuffledScheme(_SeededScheme):
    """Fisher-Yates permutation per epoch; the generator carries over between epochs."""

    kind = "shuffled"

    def _new_epoch_order(self) -> Optional[List[int]]:
        base = self.indices if self.indices is not None else None
        length = len(base) if base is not None else self.num_examples
        permutation = self.rng.permutation(length)
        if base is None:
            return permutation
        return [base[i] for i in permutation]


class BootstrapScheme(_SeededScheme):
    """
    n draws with replacement per epoch, then sequential batches.

    With explicit indices, each epoch draws len(indices) times from them.
    """

    kind = "bootstrap"

    def __init__(self, num_examples: int, batch_size: int, seed: int, **kwargs):
        if num_examples < 1:
            raise SchemeError("bootstrap needs at least one example")
        super().__init__(num_examples, batch_size, seed, **kwargs)

    def _new_epoch_order(self) -> Optional[List[int]]:
        if self.indices is not None:
            base = self.indices
            return [base[self.rng.bounded(len(base))] for _ in range(len(base))]
        n = self.num_examples
        return [self.rng.bounded(n) for _ in range(n)]


SCHEMES: Dict[str, Type[IterationScheme]] = {
    SequentialScheme.kind: SequentialScheme,
    ShuffledScheme.kind: ShuffledScheme,
    BootstrapScheme.kind: BootstrapScheme,
}


# =============================================================================
# Constructors
# =============================================================================

def sequential_batches(n: int, batch_size: int, policy: BatchPolicy = BatchPolicy.KEEP) -> SequentialScheme:
    return SequentialScheme(n, batch_size, policy=policy)


def shuffled_batches(
    n: int, batch_size: int, seed: int, policy: BatchPolicy = BatchPolicy.KEEP
) -> ShuffledScheme:
    return ShuffledScheme(n, batch_size, seed, policy=policy)


def bootstrap(n: int, batch_size: int, seed: int, policy: BatchPolicy = BatchPolicy.KEEP) -> BootstrapScheme:
    return BootstrapScheme(n, batch_size, seed, policy=policy)


def sequential_examples(n: int) -> SequentialScheme:
    """Single indices 0, 1, ..., n-1 per epoch."""
    return SequentialScheme(n, 1, examplewise=True)


def shuffled_examples(n: int, seed: int) -> ShuffledScheme:
    """Single indices in a fresh permutation per epoch."""
    return ShuffledScheme(n, 1, seed, examplewise=True)


def cross_validation(
    n: int, k: int, batch_size: int = 1, policy: BatchPolicy = BatchPolicy.KEEP
) -> List[Tuple[SequentialScheme, SequentialScheme]]:
    """
    k contiguous folds.

    Fold f validates on [f*(n//k) + min(f, n%k), ...) with the first n%k
    folds one larger; it trains on the ascending complement.

    Returns:
        [(train_scheme, valid_scheme), ...] over explicit index lists
    """
    if not 1 <= k <= n:
        raise SchemeError(f"cross validation needs 1 <= k <= n, got k={k}, n={n}")
    base, remainder = divmod(n, k)
    folds = []
    for f in range(k):
        start = f * base + min(f, remainder)
        stop = start + base + (1 if f < remainder else 0)
        valid = list(range(start, stop))
        train = list(range(0, start)) + list(range(stop, n))
        folds.append((
            SequentialScheme(n, batch_size, policy=policy, indices=train),
            SequentialScheme(n, batch_size, policy=policy, indices=valid),
        ))
    return folds


# =============================================================================
# State round trip
# =============================================================================

def save_state(scheme: IterationScheme) -> SchemeState:
    return scheme.save_state()


def restore_state(state: Union[SchemeState, Dict[str, Any]]) -> IterationScheme:
    """Rebuild a scheme from its saved state alone."""
    if isinstance(state, dict):
        state = SchemeState.from_dict(state)
    cls = SCHEMES.get(state.kind)
    if cls is None:
        raise SchemeError(f"unknown scheme kind {state.kind!r}")
    policy = _policy(state.last_batch_policy)
    if cls is SequentialScheme:
        scheme: IterationScheme = SequentialScheme(
            state.num_examples, state.batch_size, policy=policy,
            indices=state.indices, examplewise=state.examplewise,
        )
    else:
        if state.seed is None and state.rng is None:
            raise SchemeError(f"{state.kind} state needs a generator")
        scheme = cls(
            state.num_examples, state.batch_size, state.seed or 0, policy=policy,
            indices=state.indices, examplewise=state.examplewise,
        )
    scheme.load_state(state)
    return scheme
