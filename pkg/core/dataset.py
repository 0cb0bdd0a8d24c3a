"""
Split-scoped access to a container.

A Dataset resolves one split of a container, drops the sources that split
marks UNAVAILABLE, and serves examples by split-relative index. The
IN_MEMORY backend loads the split's rows once; OUT_OF_CORE reads them from
disk on demand, one contiguous read per run of consecutive indices.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.container import ContainerReader, Interval, read_header
from core.context import Backend
from core.errors import IndexOutOfBoundsError, UnequalSourceLengthsError, UnknownSplitError
from core.structured_logging import get_logger

logger = get_logger(__name__)


def _runs(indices: Sequence[int]) -> List[Tuple[int, int]]:
    """Consecutive-index runs as half-open (start, stop) pairs, in request order."""
    runs: List[Tuple[int, int]] = []
    for index in indices:
        if runs and runs[-1][1] == index:
            runs[-1] = (runs[-1][0], index + 1)
        else:
            runs.append((index, index + 1))
    return runs


class Dataset:
    """
    One split of a container.

    Attributes:
        path: Container path
        split: Split name
        sources: Available sources, in container order
        num_examples: Common interval length of the available sources
        backend: IN_MEMORY or OUT_OF_CORE

    Example:
        train = Dataset.open("blobs.bfdc", "train", Backend.OUT_OF_CORE)
        batch = train.get_examples([0, 1, 5])
    """

    def __init__(
        self,
        path: Path,
        split: str,
        sources: List[str],
        intervals: Dict[str, Interval],
        backend: Backend,
        reader: ContainerReader,
    ):
        self.path = path
        self.split = split
        self.sources = sources
        self.intervals = intervals
        self.backend = backend
        self.num_examples = len(intervals[sources[0]]) if sources else 0
        self._reader = reader
        self._memory: Optional[Dict[str, np.ndarray]] = None

        if backend is Backend.IN_MEMORY:
            self._memory = {
                name: reader.read_rows(name, intervals[name].start, intervals[name].stop)
                for name in sources
            }

    @classmethod
    def open(
        cls,
        container_path: Union[str, Path],
        split_name: str,
        backend: Backend = Backend.IN_MEMORY,
    ) -> "Dataset":
        """
        Open one split.

        Raises:
            UnknownSplitError: the container has no such split
            UnequalSourceLengthsError: available sources disagree on length
        """
        path = Path(container_path)
        header = read_header(path)
        split = header.split(split_name)
        if split is None:
            raise UnknownSplitError(
                f"unknown split {split_name!r}; have {[s.name for s in header.splits]}"
            )

        source_order = [desc.name for desc in header.sources]
        available = [name for name in source_order if split.per_source.get(name) is not None]
        intervals = {name: split.per_source[name] for name in available}

        lengths = {name: len(intervals[name]) for name in available}
        if len(set(lengths.values())) > 1:
            raise UnequalSourceLengthsError(f"split {split_name!r} has unequal source lengths {lengths}")

        dataset = cls(path, split_name, available, intervals, backend, ContainerReader(path, header))
        logger.debug(
            f"Opened split {split_name} with {dataset.num_examples} examples",
            extra={
                "event": "dataset_opened",
                "path": str(path),
                "split": split_name,
                "num_examples": dataset.num_examples,
                "backend": backend.value,
            },
        )
        return dataset

    @property
    def reads(self) -> int:
        """Disk reads performed so far (out-of-core accounting)."""
        return self._reader.reads

    def get_examples(self, indices: Sequence[int]) -> Dict[str, np.ndarray]:
        """
        Rows for split-relative indices, stacked in request order.

        Duplicates are allowed (bootstrap resampling needs them).

        Raises:
            IndexOutOfBoundsError: an index is outside [0, num_examples)
        """
        indices = [int(i) for i in indices]
        for index in indices:
            if not 0 <= index < self.num_examples:
                raise IndexOutOfBoundsError(
                    f"index {index} outside [0, {self.num_examples}) of split {self.split!r}"
                )

        if self._memory is not None:
            return {name: self._memory[name][indices] for name in self.sources}

        result: Dict[str, np.ndarray] = {}
        runs = _runs(indices)
        for name in self.sources:
            base = self.intervals[name].start
            if not runs:
                result[name] = self._reader.read_rows(name, base, base)
                continue
            parts = [self._reader.read_rows(name, base + start, base + stop) for start, stop in runs]
            result[name] = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
        return result

    def __repr__(self) -> str:
        return (
            f"Dataset({self.path.name!r}, split={self.split!r}, sources={self.sources}, "
            f"num_examples={self.num_examples}, backend={self.backend.value})"
        )
