"""
Dataset registry, raw-file download and conversion into containers.

Every registered dataset lives in its own folder under the data directory:

    <data_dir>/<name>/<raw files>
    <data_dir>/<name>/MANIFEST.json   (sha256 of each raw file)

Synthetic entries fabricate their raw CSV files from a seed; URL entries
fetch them with requests and check them against the registry digests.
Downloads are idempotent: files already present with the recorded digest are
left alone, anything missing or tampered with is fetched (or generated)
again.

Usage:
    paths = download("synth-blobs", "kiln-data")
    container = convert("synth-blobs", "kiln-data", "blobs.bfdc")
"""

import hashlib
import json
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import requests

from config.settings import CONTAINER_FORMAT_VERSION, TOOL_NAME, __version__, get_settings
from core.api_retry import DEFAULT_DOWNLOAD_RETRY, RetryConfig, RetryHandler
from core.container import ContainerFile, Interval, Provenance, SourceDescriptor, SplitDescriptor, write_container
from core.errors import DatasetError, DigestMismatchError, MissingRawFilesError, UnknownDatasetError
from core.rng import Rng
from core.structured_logging import get_logger, timed

logger = get_logger(__name__)

PathLike = Union[str, Path]

MANIFEST_NAME = "MANIFEST.json"
BUILTIN_REGISTRY = Path(__file__).resolve().parent.parent / "data" / "datasets.json"
CHUNK_SIZE = 1 << 16


# =============================================================================
# Registry
# =============================================================================

@dataclass
class RawFile:
    filename: str
    url: Optional[str] = None
    sha256: Optional[str] = None


@dataclass
class DatasetEntry:
    """
    One registry entry.

    Attributes:
        name: Registry key
        kind: "synthetic" or "url"
        converter: Name of the converter that turns the raw files into a container
        files: Raw files (URL entries carry url and sha256)
        generator: Generator name for synthetic entries
        params: Generator parameters (seed, sizes)
    """
    name: str
    kind: str
    converter: str
    files: List[RawFile]
    generator: Optional[str] = None
    params: Dict[str, Any] = field(default_factory=dict)
    description: str = ""

    @classmethod
    def from_dict(cls, name: str, data: Dict[str, Any]) -> "DatasetEntry":
        try:
            files = [
                RawFile(filename=f) if isinstance(f, str) else RawFile(f["filename"], f.get("url"), f.get("sha256"))
                for f in data["files"]
            ]
            entry = cls(
                name=name,
                kind=data["kind"],
                converter=data["converter"],
                files=files,
                generator=data.get("generator"),
                params=dict(data.get("params", {})),
                description=data.get("description", ""),
            )
        except (KeyError, TypeError) as e:
            raise DatasetError(f"malformed registry entry {name!r}: {e}") from e
        if entry.kind not in ("synthetic", "url"):
            raise DatasetError(f"registry entry {name!r} has unknown kind {entry.kind!r}")
        if entry.kind == "url" and any(not f.url or not f.sha256 for f in files):
            raise DatasetError(f"registry entry {name!r}: every URL file needs url and sha256")
        return entry


def load_registry(extra_path: Optional[PathLike] = None) -> Dict[str, DatasetEntry]:
    """Built-in registry, overlaid with entries from `extra_path` (or KILN_REGISTRY)."""
    if extra_path is None:
        extra_path = get_settings().registry_path
    raw: Dict[str, Any] = json.loads(BUILTIN_REGISTRY.read_text(encoding="utf-8"))
    if extra_path is not None:
        try:
            raw.update(json.loads(Path(extra_path).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise DatasetError(f"cannot read registry {extra_path}: {e}") from e
    return {name: DatasetEntry.from_dict(name, data) for name, data in raw.items()}


def get_entry(name: str, registry: Optional[Dict[str, DatasetEntry]] = None) -> DatasetEntry:
    registry = registry if registry is not None else load_registry()
    if name not in registry:
        raise UnknownDatasetError(f"unknown dataset {name!r}; registered: {sorted(registry)}")
    return registry[name]


# =============================================================================
# Digests
# =============================================================================

def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _read_manifest(folder: Path) -> Dict[str, str]:
    try:
        return json.loads((folder / MANIFEST_NAME).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError):
        return {}


def _write_manifest(folder: Path, digests: Dict[str, str]) -> None:
    (folder / MANIFEST_NAME).write_text(json.dumps(digests, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _expected_digests(entry: DatasetEntry, folder: Path) -> Dict[str, Optional[str]]:
    """Registry digests for URL entries, manifest digests for generated files."""
    manifest = _read_manifest(folder)
    return {f.filename: f.sha256 if entry.kind == "url" else manifest.get(f.filename) for f in entry.files}


def raw_folder(raw_dir: PathLike, name: str) -> Path:
    """`raw_dir/<name>` when it exists, else `raw_dir` itself."""
    raw_dir = Path(raw_dir)
    nested = raw_dir / name
    return nested if nested.is_dir() else raw_dir


def check_raw_files(entry: DatasetEntry, folder: Path) -> List[Path]:
    """
    Raises:
        MissingRawFilesError: a raw file or the manifest is absent
        DigestMismatchError: a raw file differs from its recorded digest
    """
    expected = _expected_digests(entry, folder)
    missing = [name for name in expected if not (folder / name).is_file()]
    if missing:
        raise MissingRawFilesError(f"{entry.name}: raw files {missing} not found in {folder}")
    paths = []
    for filename, digest in expected.items():
        path = folder / filename
        if digest is None:
            raise MissingRawFilesError(f"{entry.name}: no recorded digest for {filename} (run download first)")
        actual = file_sha256(path)
        if actual != digest:
            raise DigestMismatchError(f"{entry.name}: {filename} has sha256 {actual}, expected {digest}")
        paths.append(path)
    return paths


# =============================================================================
# Synthetic generators
# =============================================================================

def generate_blobs(seed: int, num_examples: int, std: float = 0.5, center: float = 2.0) -> pd.DataFrame:
    """
    Two Gaussian clusters centred on (-c, -c) (label 0) and (c, c) (label 1).

    Per example: label = bounded(2), then x0 and x1 as center + std * normal().
    """
    rng = Rng.from_seed(seed)
    rows = []
    for _ in range(num_examples):
        label = rng.bounded(2)
        mean = center if label == 1 else -center
        x0 = mean + std * rng.normal()
        x1 = mean + std * rng.normal()
        rows.append((x0, x1, label))
    return pd.DataFrame(rows, columns=["x0", "x1", "label"])


def generate_seq(seed: int, num_sequences: int, vocab_size: int, min_length: int, max_length: int) -> pd.DataFrame:
    """Token sequences in long form (sequence_id, position, token); tokens in [1, vocab_size)."""
    if not 2 <= vocab_size or not 1 <= min_length <= max_length:
        raise DatasetError(
            f"bad sequence parameters: vocab_size={vocab_size}, lengths [{min_length}, {max_length}]"
        )
    rng = Rng.from_seed(seed)
    rows = []
    for sequence_id in range(num_sequences):
        length = min_length + rng.bounded(max_length - min_length + 1)
        for position in range(length):
            rows.append((sequence_id, position, 1 + rng.bounded(vocab_size - 1)))
    return pd.DataFrame(rows, columns=["sequence_id", "position", "token"])


GENERATORS: Dict[str, Callable[..., pd.DataFrame]] = {
    "blobs": generate_blobs,
    "seq": generate_seq,
}


def _generate(entry: DatasetEntry, folder: Path) -> None:
    if entry.generator not in GENERATORS:
        raise DatasetError(f"{entry.name}: unknown generator {entry.generator!r}")
    if len(entry.files) != 1:
        raise DatasetError(f"{entry.name}: synthetic entries produce exactly one raw file")
    try:
        frame = GENERATORS[entry.generator](**entry.params)
    except TypeError as e:
        raise DatasetError(f"{entry.name}: bad generator parameters: {e}") from e
    frame.to_csv(folder / entry.files[0].filename, index=False, float_format="%.17g", lineterminator="\n")


# =============================================================================
# Download
# =============================================================================

def _fetch(url: str, target: Path, expected_sha256: str, timeout: float) -> None:
    """Stream one URL into target via a temp file; the digest is checked before the rename."""
    response = requests.get(url, stream=True, timeout=timeout)
    response.raise_for_status()
    tmp = target.with_name(target.name + ".part")
    digest = hashlib.sha256()
    try:
        with open(tmp, "wb") as f:
            for chunk in response.iter_content(chunk_size=CHUNK_SIZE):
                if chunk:
                    digest.update(chunk)
                    f.write(chunk)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    if digest.hexdigest() != expected_sha256:
        tmp.unlink()
        raise DigestMismatchError(f"{url}: sha256 {digest.hexdigest()}, expected {expected_sha256}")
    tmp.replace(target)


@timed("dataset_download")
def download(
    name: str,
    dest_dir: Optional[PathLike] = None,
    registry: Optional[Dict[str, DatasetEntry]] = None,
    retry_config: RetryConfig = DEFAULT_DOWNLOAD_RETRY,
    timeout: float = 60.0,
) -> List[Path]:
    """
    Make the raw files of a registered dataset available under dest_dir/<name>.

    Returns:
        Paths of the raw files

    Raises:
        UnknownDatasetError: name is not registered
        DigestMismatchError: a fetched file does not match its digest
        requests.RequestException: the network failed after all retries
    """
    entry = get_entry(name, registry)
    dest_dir = Path(dest_dir) if dest_dir is not None else get_settings().data_dir
    folder = dest_dir / name
    folder.mkdir(parents=True, exist_ok=True)

    try:
        paths = check_raw_files(entry, folder)
    except (MissingRawFilesError, DigestMismatchError) as e:
        logger.info(
            f"Fetching {name}: {e}",
            extra={"event": "dataset_fetch", "dataset": name, "path": str(folder)},
        )
    else:
        logger.info(
            f"{name} already present in {folder}",
            extra={"event": "dataset_cached", "dataset": name, "path": str(folder)},
        )
        return paths

    if entry.kind == "synthetic":
        _generate(entry, folder)
    else:
        handler = RetryHandler(retry_config, operation_name=f"download {name}")
        for raw in entry.files:
            target = folder / raw.filename
            if target.is_file() and file_sha256(target) == raw.sha256:
                continue
            handler.execute(lambda: _fetch(raw.url, target, raw.sha256, timeout), raise_on_failure=True)

    _write_manifest(folder, {f.filename: file_sha256(folder / f.filename) for f in entry.files})
    paths = check_raw_files(entry, folder)
    logger.info(
        f"Downloaded {name} ({len(paths)} files)",
        extra={"event": "dataset_downloaded", "dataset": name, "path": str(folder)},
    )
    return paths


# =============================================================================
# Conversion
# =============================================================================

def _train_test(num_examples: int, sources: Sequence[str]) -> List[SplitDescriptor]:
    cut = num_examples * 4 // 5
    return [
        SplitDescriptor("train", {s: Interval(0, cut) for s in sources}),
        SplitDescriptor("test", {s: Interval(cut, num_examples) for s in sources}),
    ]


def convert_blobs(paths: Sequence[Path]) -> Tuple[List[Tuple[SourceDescriptor, np.ndarray]], List[SplitDescriptor]]:
    """features f64 [N, 2] and targets u8 [N, 1]; train/test 80/20 in file order."""
    frame = pd.read_csv(paths[0], float_precision="round_trip")
    missing = {"x0", "x1", "label"} - set(frame.columns)
    if missing:
        raise DatasetError(f"{paths[0]}: missing columns {sorted(missing)}")
    features = frame[["x0", "x1"]].to_numpy(dtype=np.float64)
    targets = frame[["label"]].to_numpy().astype(np.uint8)
    n = len(frame)
    sources = [
        (SourceDescriptor("features", "f64", [n, 2], ["batch", "feature"]), features),
        (SourceDescriptor("targets", "u8", [n, 1], ["batch", "index"]), targets),
    ]
    return sources, _train_test(n, ["features", "targets"])


def convert_seq(paths: Sequence[Path]) -> Tuple[List[Tuple[SourceDescriptor, np.ndarray]], List[SplitDescriptor]]:
    """tokens i32 [N, Lmax] zero-padded and lengths i32 [N, 1]; train/test 80/20."""
    frame = pd.read_csv(paths[0])
    missing = {"sequence_id", "position", "token"} - set(frame.columns)
    if missing:
        raise DatasetError(f"{paths[0]}: missing columns {sorted(missing)}")
    frame = frame.sort_values(["sequence_id", "position"], kind="stable")
    groups = [group["token"].to_numpy(dtype=np.int32) for _, group in frame.groupby("sequence_id", sort=True)]
    n = len(groups)
    longest = max((len(g) for g in groups), default=0)
    tokens = np.zeros((n, longest), dtype=np.int32)
    lengths = np.zeros((n, 1), dtype=np.int32)
    for i, group in enumerate(groups):
        tokens[i, : len(group)] = group
        lengths[i, 0] = len(group)
    sources = [
        (SourceDescriptor("tokens", "i32", [n, longest], ["batch", "time"]), tokens),
        (SourceDescriptor("lengths", "i32", [n, 1], ["batch", "index"]), lengths),
    ]
    return sources, _train_test(n, ["tokens", "lengths"])


CONVERTERS = {
    "blobs": convert_blobs,
    "seq": convert_seq,
}


@timed("dataset_conversion")
def convert(
    name: str,
    raw_dir: PathLike,
    out_path: PathLike,
    command_line: Optional[str] = None,
    registry: Optional[Dict[str, DatasetEntry]] = None,
) -> ContainerFile:
    """
    Convert the raw files of a dataset into a container.

    Args:
        name: Registered dataset name
        raw_dir: Download directory (or the dataset folder itself)
        out_path: Container to write
        command_line: Recorded verbatim in the provenance; defaults to the
            equivalent `kiln convert` invocation

    Raises:
        UnknownDatasetError, MissingRawFilesError, DigestMismatchError
    """
    entry = get_entry(name, registry)
    if entry.converter not in CONVERTERS:
        raise DatasetError(f"{name}: unknown converter {entry.converter!r}")
    folder = raw_folder(raw_dir, name)
    paths = check_raw_files(entry, folder)

    sources, splits = CONVERTERS[entry.converter](paths)
    if command_line is None:
        command_line = shlex.join([TOOL_NAME, "convert", name, "--raw", str(raw_dir), "--out", str(out_path)])
    provenance = Provenance(
        created_by=f"{TOOL_NAME}-convert {__version__}",
        command_line=command_line,
        interface_versions={TOOL_NAME: __version__, "container_format": str(CONTAINER_FORMAT_VERSION)},
    )
    result = write_container(out_path, sources, splits, provenance)
    logger.info(
        f"Converted {name} into {out_path}",
        extra={"event": "dataset_converted", "dataset": name, "path": str(out_path)},
    )
    return result
