"""
BFDC0001 dataset container.

File layout:
    magic "BFDC0001" (8 bytes ASCII)
    u32 little-endian header length
    UTF-8 JSON header (sorted keys, compact separators)
    blobs, each starting on a 64-byte boundary, little-endian row-major

The header answers what sources exist, how they are split, which sources
a split does not offer, and what each axis means. It also carries the
provenance of the file (tool, versions, exact command line).

Usage:
    header = write_container(path, [(descriptor, array), ...], splits, provenance)
    header = read_header(path)
    rows = read_slice(path, "features", 0, 10)
    report = validate(path)
    print(info(path))
"""

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import CONTAINER_FORMAT_VERSION, CONTAINER_MAGIC
from core.binary import DTYPES, align, dtype_name_of, num_bytes, tensor_from_bytes, tensor_to_bytes
from core.errors import (
    BadMagicError,
    ContainerError,
    HeaderInvariantError,
    MalformedHeaderError,
    RowRangeError,
    ShapeMismatchError,
    SplitRangeError,
    UnknownSourceError,
    UnsupportedVersionError,
)
from core.structured_logging import get_logger, timed

logger = get_logger(__name__)

UNAVAILABLE = "UNAVAILABLE"
_PREFIX_SIZE = len(CONTAINER_MAGIC) + 4

PathLike = Union[str, Path]


# =============================================================================
# Header model
# =============================================================================

@dataclass(frozen=True)
class Interval:
    """Half-open row range [start, stop)."""
    start: int
    stop: int

    def __len__(self) -> int:
        return self.stop - self.start

    def to_dict(self) -> Dict[str, int]:
        return {"start": self.start, "stop": self.stop}


@dataclass
class SourceDescriptor:
    """
    One named data source.

    Attributes:
        name: Source name ("features", "targets", ...)
        dtype: One of f32, f64, i32, i64, u8
        shape: Full shape; shape[0] is the total example count
        axis_labels: One label per axis, the first one "batch"
        offset: Absolute byte offset of the blob (set by the writer)
        nbytes: Blob length (set by the writer)
        sha256: Hex digest of the blob (set by the writer)
    """
    name: str
    dtype: str
    shape: List[int]
    axis_labels: List[str]
    offset: int = 0
    nbytes: int = 0
    sha256: str = ""

    @property
    def num_examples(self) -> int:
        return self.shape[0]

    @property
    def row_shape(self) -> Tuple[int, ...]:
        return tuple(self.shape[1:])

    @property
    def row_bytes(self) -> int:
        return num_bytes(self.row_shape, self.dtype)

    def problems(self) -> List[str]:
        """Descriptor invariant violations (empty when valid)."""
        found = []
        if self.dtype not in DTYPES:
            found.append(f"source {self.name!r}: unsupported dtype {self.dtype!r}")
            return found
        if not self.shape:
            found.append(f"source {self.name!r}: shape needs a batch axis")
            return found
        if any((not isinstance(d, int)) or d < 0 for d in self.shape):
            found.append(f"source {self.name!r}: shape {self.shape} has negative or non-integer dims")
            return found
        if len(self.axis_labels) != len(self.shape):
            found.append(
                f"source {self.name!r}: {len(self.axis_labels)} axis labels for {len(self.shape)} dims"
            )
        elif self.axis_labels[0] != "batch":
            found.append(f"source {self.name!r}: first axis label is {self.axis_labels[0]!r}, not 'batch'")
        expected = num_bytes(self.shape, self.dtype)
        if self.nbytes != expected:
            found.append(
                f"source {self.name!r}: nbytes {self.nbytes} does not match shape {self.shape} "
                f"{self.dtype} ({expected} bytes)"
            )
        return found

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "dtype": self.dtype,
            "shape": list(self.shape),
            "axis_labels": list(self.axis_labels),
            "offset": self.offset,
            "nbytes": self.nbytes,
            "sha256": self.sha256,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SourceDescriptor":
        return cls(
            name=str(data["name"]),
            dtype=str(data["dtype"]),
            shape=list(data["shape"]),
            axis_labels=[str(a) for a in data["axis_labels"]],
            offset=int(data["offset"]),
            nbytes=int(data["nbytes"]),
            sha256=str(data["sha256"]),
        )


@dataclass
class SplitDescriptor:
    """
    A named split: per source an interval, or None when the split does
    not offer that source (serialized as "UNAVAILABLE").
    """
    name: str
    per_source: Dict[str, Optional[Interval]]

    def available_sources(self) -> List[str]:
        return [name for name, interval in self.per_source.items() if interval is not None]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "sources": {
                source: interval.to_dict() if interval is not None else UNAVAILABLE
                for source, interval in self.per_source.items()
            },
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SplitDescriptor":
        per_source: Dict[str, Optional[Interval]] = {}
        for source, value in data["sources"].items():
            if value == UNAVAILABLE:
                per_source[source] = None
            else:
                per_source[source] = Interval(int(value["start"]), int(value["stop"]))
        return cls(name=str(data["name"]), per_source=per_source)


@dataclass
class Provenance:
    """Who produced a container and how."""
    created_by: str = ""
    command_line: str = ""
    interface_versions: Dict[str, str] = field(default_factory=dict)


@dataclass
class ContainerHeader:
    format_version: int
    created_by: str
    command_line: str
    sources: List[SourceDescriptor]
    splits: List[SplitDescriptor]
    interface_versions: Dict[str, str] = field(default_factory=dict)

    def source(self, name: str) -> SourceDescriptor:
        for desc in self.sources:
            if desc.name == name:
                return desc
        raise UnknownSourceError(f"unknown source {name!r}; have {[s.name for s in self.sources]}")

    def split(self, name: str) -> Optional[SplitDescriptor]:
        for split in self.splits:
            if split.name == name:
                return split
        return None

    def split_problems(self) -> List[str]:
        found = []
        by_name = {s.name: s for s in self.sources}
        if len(by_name) != len(self.sources):
            found.append("duplicate source names")
        if len({s.name for s in self.splits}) != len(self.splits):
            found.append("duplicate split names")
        for split in self.splits:
            for source, interval in split.per_source.items():
                if source not in by_name:
                    found.append(f"split {split.name!r} names unknown source {source!r}")
                    continue
                if interval is None:
                    continue
                total = by_name[source].shape[0] if by_name[source].shape else 0
                if not 0 <= interval.start <= interval.stop <= total:
                    found.append(
                        f"split {split.name!r}: {source} [{interval.start}, {interval.stop}) "
                        f"outside [0, {total}]"
                    )
        return found

    def problems(self) -> List[str]:
        found = []
        for desc in self.sources:
            found.extend(desc.problems())
        found.extend(self.split_problems())
        return found

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "created_by": self.created_by,
            "command_line": self.command_line,
            "interface_versions": dict(self.interface_versions),
            "sources": [s.to_dict() for s in self.sources],
            "splits": [s.to_dict() for s in self.splits],
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ContainerHeader":
        return cls(
            format_version=int(data["format_version"]),
            created_by=str(data["created_by"]),
            command_line=str(data["command_line"]),
            interface_versions={str(k): str(v) for k, v in data.get("interface_versions", {}).items()},
            sources=[SourceDescriptor.from_dict(s) for s in data["sources"]],
            splits=[SplitDescriptor.from_dict(s) for s in data["splits"]],
        )


@dataclass
class ContainerFile:
    """A written container: its path and the header as stored."""
    path: Path
    header: ContainerHeader


# =============================================================================
# Writing
# =============================================================================

@timed("container_write")
def write_container(
    path: PathLike,
    sources: Sequence[Tuple[SourceDescriptor, np.ndarray]],
    splits: Sequence[SplitDescriptor],
    provenance: Optional[Provenance] = None,
) -> ContainerFile:
    """
    Write a container file.

    Args:
        path: Destination file (replaced atomically)
        sources: (descriptor, payload) pairs; offsets/nbytes/sha256 are filled in here
        splits: Split descriptors
        provenance: created_by / command_line / interface versions

    Returns:
        ContainerFile with the header exactly as written

    Raises:
        ShapeMismatchError: payload disagrees with its descriptor
        SplitRangeError: a split interval is out of range or names an unknown source
    """
    provenance = provenance or Provenance()
    path = Path(path)

    descriptors: List[SourceDescriptor] = []
    payloads: List[bytes] = []
    for desc, array in sources:
        array = np.asarray(array)
        if list(array.shape) != list(desc.shape):
            raise ShapeMismatchError(
                f"source {desc.name!r}: payload shape {list(array.shape)} != descriptor {list(desc.shape)}"
            )
        if array.size and dtype_name_of(array) != desc.dtype:
            raise ShapeMismatchError(
                f"source {desc.name!r}: payload dtype {array.dtype} != descriptor {desc.dtype}"
            )
        blob = tensor_to_bytes(array, desc.dtype)
        descriptors.append(
            replace(desc, shape=list(desc.shape), nbytes=len(blob), sha256=hashlib.sha256(blob).hexdigest())
        )
        payloads.append(blob)

    header = ContainerHeader(
        format_version=CONTAINER_FORMAT_VERSION,
        created_by=provenance.created_by,
        command_line=provenance.command_line,
        interface_versions=dict(provenance.interface_versions),
        sources=descriptors,
        splits=list(splits),
    )

    problems = [p for desc in descriptors for p in desc.problems()]
    if problems:
        raise ShapeMismatchError("; ".join(problems))
    split_problems = header.split_problems()
    if split_problems:
        raise SplitRangeError("; ".join(split_problems))

    header_bytes = _layout(header)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(CONTAINER_MAGIC)
            f.write(struct.pack("<I", len(header_bytes)))
            f.write(header_bytes)
            for desc, blob in zip(header.sources, payloads):
                f.write(b"\x00" * (desc.offset - f.tell()))
                f.write(blob)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise

    logger.info(
        f"Container written: {len(descriptors)} sources, {len(header.splits)} splits",
        extra={"event": "container_written", "path": str(path)},
    )
    return ContainerFile(path=path, header=header)


def _layout(header: ContainerHeader) -> bytes:
    """Assign absolute blob offsets; iterate until the header length is stable."""
    header_bytes = header.to_json_bytes()
    while True:
        offset = align(_PREFIX_SIZE + len(header_bytes))
        for desc in header.sources:
            desc.offset = offset
            offset = align(offset + desc.nbytes)
        updated = header.to_json_bytes()
        if len(updated) == len(header_bytes):
            return updated
        header_bytes = updated


# =============================================================================
# Reading
# =============================================================================

def _read_prefix(f: BinaryIO) -> Dict[str, Any]:
    magic = f.read(len(CONTAINER_MAGIC))
    if magic != CONTAINER_MAGIC:
        if len(magic) == len(CONTAINER_MAGIC) and magic[:4] == CONTAINER_MAGIC[:4]:
            raise UnsupportedVersionError(f"unsupported container version {magic[4:]!r}")
        raise BadMagicError(f"bad magic {magic!r}, expected {CONTAINER_MAGIC!r}")
    length_bytes = f.read(4)
    if len(length_bytes) != 4:
        raise MalformedHeaderError("truncated header length")
    (length,) = struct.unpack("<I", length_bytes)
    raw = f.read(length)
    if len(raw) != length:
        raise MalformedHeaderError(f"truncated header: expected {length} bytes, got {len(raw)}")
    try:
        data = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"header is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise MalformedHeaderError("header is not a JSON object")
    return data


def _parse_header(data: Dict[str, Any]) -> ContainerHeader:
    try:
        header = ContainerHeader.from_dict(data)
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise MalformedHeaderError(f"header misses or mistypes a field: {e}") from e
    if header.format_version != CONTAINER_FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format_version {header.format_version}")
    return header


def read_header(path: PathLike) -> ContainerHeader:
    """
    Parse a container header without touching the blobs.

    Raises:
        BadMagicError, UnsupportedVersionError, MalformedHeaderError,
        HeaderInvariantError
    """
    try:
        with open(path, "rb") as f:
            header = _parse_header(_read_prefix(f))
    except OSError as e:
        raise ContainerError(f"cannot open container {path}: {e}") from e
    problems = header.problems()
    if problems:
        raise HeaderInvariantError("; ".join(problems))
    return header


class ContainerReader:
    """
    Out-of-core row reader over one container.

    Each read seeks to the first requested row and reads exactly the
    requested rows. `reads` and `bytes_read` count I/O for callers that
    care about access patterns.
    """

    def __init__(self, path: PathLike, header: Optional[ContainerHeader] = None):
        self.path = Path(path)
        self.header = header or read_header(self.path)
        self.reads = 0
        self.bytes_read = 0

    def read_rows(self, source_name: str, start: int, stop: int) -> np.ndarray:
        desc = self.header.source(source_name)
        if not 0 <= start <= stop <= desc.num_examples:
            raise RowRangeError(
                f"rows [{start}, {stop}) outside source {source_name!r} with {desc.num_examples} rows"
            )
        count = stop - start
        if count == 0:
            return np.empty((0,) + desc.row_shape, dtype=DTYPES[desc.dtype].numpy.newbyteorder("="))
        length = count * desc.row_bytes
        with open(self.path, "rb") as f:
            f.seek(desc.offset + start * desc.row_bytes)
            payload = f.read(length)
        self.reads += 1
        self.bytes_read += len(payload)
        if len(payload) != length:
            raise ContainerError(f"source {source_name!r}: blob truncated at rows [{start}, {stop})")
        return tensor_from_bytes(payload, desc.dtype, (count,) + desc.row_shape)


def read_slice(path: PathLike, source_name: str, start: int, stop: int) -> np.ndarray:
    """
    Rows [start, stop) of one source.

    Raises:
        UnknownSourceError: no such source
        RowRangeError: range outside the source
    """
    return ContainerReader(path).read_rows(source_name, start, stop)


# =============================================================================
# Validation
# =============================================================================

@dataclass
class SourceCheck:
    name: str
    digest_ok: bool
    problems: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.digest_ok and not self.problems


@dataclass
class ValidationReport:
    """Outcome of validate(); corruption is data here, not an exception."""
    path: Path
    header_problems: List[str] = field(default_factory=list)
    sources: List[SourceCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.header_problems and all(s.passed for s in self.sources)

    def source(self, name: str) -> SourceCheck:
        for check in self.sources:
            if check.name == name:
                return check
        raise KeyError(name)

    def format(self) -> str:
        lines = [f"{self.path}: {'OK' if self.passed else 'FAILED'}"]
        for problem in self.header_problems:
            lines.append(f"  header: FAIL {problem}")
        for check in self.sources:
            status = "PASS" if check.passed else "FAIL"
            detail = "" if check.digest_ok else " (sha256 mismatch)"
            lines.append(f"  {check.name}: {status}{detail}")
            for problem in check.problems:
                lines.append(f"    {problem}")
        return "\n".join(lines)


def validate(path: PathLike) -> ValidationReport:
    """
    Recompute every blob digest and check all header invariants.

    Only I/O failures raise; everything else lands in the report.
    """
    path = Path(path)
    report = ValidationReport(path=path)
    file_size = path.stat().st_size

    try:
        with open(path, "rb") as f:
            header = _parse_header(_read_prefix(f))
    except ContainerError as e:
        report.header_problems.append(str(e))
        return report

    report.header_problems.extend(header.split_problems())
    with open(path, "rb") as f:
        for desc in header.sources:
            problems = desc.problems()
            digest_ok = False
            if desc.offset < _PREFIX_SIZE or desc.offset + desc.nbytes > file_size:
                problems.append(f"source {desc.name!r}: blob [{desc.offset}, +{desc.nbytes}) outside file")
            else:
                f.seek(desc.offset)
                digest_ok = hashlib.sha256(f.read(desc.nbytes)).hexdigest() == desc.sha256
            report.sources.append(SourceCheck(name=desc.name, digest_ok=digest_ok, problems=problems))

    logger.info(
        f"Container validated: {'pass' if report.passed else 'FAIL'}",
        extra={"event": "container_validated", "path": str(path)},
    )
    return report


# =============================================================================
# Inspection
# =============================================================================

def info(path: PathLike) -> str:
    """Stable human-readable description of a container's metadata."""
    header = read_header(path)
    lines = [
        f"kiln container (format {header.format_version})",
        f"created by: {header.created_by or '(unknown)'}",
        f"command line: {header.command_line or '(unknown)'}",
    ]
    if header.interface_versions:
        versions = ", ".join(f"{k}={v}" for k, v in sorted(header.interface_versions.items()))
        lines.append(f"interface versions: {versions}")

    lines.append("sources:")
    if not header.sources:
        lines.append("  (none)")
    for desc in header.sources:
        shape = ", ".join(str(d) for d in desc.shape)
        axes = ", ".join(desc.axis_labels)
        lines.append(f"  {desc.name}: {desc.dtype} [{shape}] ({axes})")

    if not header.splits:
        lines.append("no splits")
    else:
        lines.append("splits:")
        for split in header.splits:
            parts = []
            for source, interval in split.per_source.items():
                if interval is None:
                    parts.append(f"{source} {UNAVAILABLE}")
                else:
                    parts.append(f"{source} [{interval.start}, {interval.stop})")
            lines.append(f"  {split.name}: {', '.join(parts) if parts else '(empty)'}")
    return "\n".join(lines) + "\n"
