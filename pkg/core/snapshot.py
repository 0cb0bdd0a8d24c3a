"""
Snapshot files: complete serialized training state.

Layout:
    b"BFCK0001" | u32 LE json_length | JSON state tree | 64-byte aligned blobs

Arrays anywhere in the state tree are replaced by {"__blob__": i} references
into the "blobs" table of the JSON document. Blob offsets are relative to the
first aligned byte after the JSON, so the header never has to be laid out
twice. Files are written to a temp file in the destination directory and
renamed over the target, so an interrupted write leaves the previous snapshot
untouched.
"""

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Tuple, Union

import numpy as np

from config.settings import SNAPSHOT_FORMAT_VERSION, SNAPSHOT_MAGIC
from core.binary import align, dtype_name_of, num_bytes, tensor_from_bytes, tensor_to_bytes
from core.errors import SnapshotError
from core.structured_logging import get_logger, timed

logger = get_logger(__name__)

PathLike = Union[str, Path]

BLOB_KEY = "__blob__"
_PREAMBLE = len(SNAPSHOT_MAGIC) + 4


def _extract_blobs(tree: Any, blobs: List[Tuple[Dict[str, Any], bytes]]) -> Any:
    if isinstance(tree, np.ndarray):
        dtype = dtype_name_of(tree)
        payload = tensor_to_bytes(tree, dtype)
        entry = {
            "dtype": dtype,
            "shape": [int(d) for d in tree.shape],
            "nbytes": len(payload),
            "sha256": hashlib.sha256(payload).hexdigest(),
        }
        blobs.append((entry, payload))
        return {BLOB_KEY: len(blobs) - 1}
    if isinstance(tree, dict):
        for key in tree:
            if not isinstance(key, str):
                raise SnapshotError(f"state tree keys must be strings, got {key!r}")
        return {key: _extract_blobs(value, blobs) for key, value in tree.items()}
    if isinstance(tree, (list, tuple)):
        return [_extract_blobs(value, blobs) for value in tree]
    if isinstance(tree, (np.integer, np.floating, np.bool_)):
        return tree.item()
    if tree is None or isinstance(tree, (str, int, float, bool)):
        return tree
    raise SnapshotError(f"cannot serialize {type(tree).__name__} in a snapshot")


def _restore_blobs(tree: Any, arrays: List[np.ndarray]) -> Any:
    if isinstance(tree, dict):
        if set(tree) == {BLOB_KEY}:
            index = tree[BLOB_KEY]
            if not isinstance(index, int) or not 0 <= index < len(arrays):
                raise SnapshotError(f"corrupt snapshot: dangling blob reference {index!r}")
            return arrays[index]
        return {key: _restore_blobs(value, arrays) for key, value in tree.items()}
    if isinstance(tree, list):
        return [_restore_blobs(value, arrays) for value in tree]
    return tree


def encode_snapshot(state: Dict[str, Any]) -> bytes:
    """Serialize a state tree into snapshot bytes."""
    blobs: List[Tuple[Dict[str, Any], bytes]] = []
    body = _extract_blobs(state, blobs)

    offset = 0
    table = []
    for entry, payload in blobs:
        offset = align(offset)
        table.append(dict(entry, offset=offset))
        offset += len(payload)

    document = {
        "format_version": SNAPSHOT_FORMAT_VERSION,
        "blobs": table,
        "state": body,
    }
    header = json.dumps(document, sort_keys=True, separators=(",", ":")).encode("utf-8")

    data_start = align(_PREAMBLE + len(header))
    out = bytearray(SNAPSHOT_MAGIC)
    out += struct.pack("<I", len(header))
    out += header
    out += b"\x00" * (data_start - len(out))
    for entry, (_, payload) in zip(table, blobs):
        out += b"\x00" * (data_start + entry["offset"] - len(out))
        out += payload
    return bytes(out)


def decode_snapshot(data: bytes) -> Dict[str, Any]:
    """
    Parse snapshot bytes back into a state tree.

    Raises:
        SnapshotError: bad magic, unsupported version, or any corruption
    """
    if len(data) < _PREAMBLE or data[: len(SNAPSHOT_MAGIC)] != SNAPSHOT_MAGIC:
        raise SnapshotError("not a snapshot file (bad magic)")
    (header_length,) = struct.unpack_from("<I", data, len(SNAPSHOT_MAGIC))
    if _PREAMBLE + header_length > len(data):
        raise SnapshotError("corrupt snapshot: header runs past end of file")
    try:
        document = json.loads(data[_PREAMBLE: _PREAMBLE + header_length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise SnapshotError(f"corrupt snapshot header: {e}") from e
    if not isinstance(document, dict) or "state" not in document:
        raise SnapshotError("corrupt snapshot header: missing state")

    version = document.get("format_version")
    if version != SNAPSHOT_FORMAT_VERSION:
        raise SnapshotError(
            f"unsupported snapshot version {version!r} (expected {SNAPSHOT_FORMAT_VERSION})"
        )

    data_start = align(_PREAMBLE + header_length)
    arrays: List[np.ndarray] = []
    for i, entry in enumerate(document.get("blobs", [])):
        try:
            dtype = entry["dtype"]
            shape = [int(d) for d in entry["shape"]]
            start = data_start + int(entry["offset"])
            nbytes = int(entry["nbytes"])
            expected = num_bytes(shape, dtype)
        except (KeyError, TypeError, ValueError) as e:
            raise SnapshotError(f"corrupt snapshot: blob {i} entry invalid ({e})") from e
        if nbytes != expected:
            raise SnapshotError(f"corrupt snapshot: blob {i} size {nbytes} != {expected}")
        payload = data[start: start + nbytes]
        if len(payload) != nbytes:
            raise SnapshotError(f"corrupt snapshot: blob {i} truncated")
        if hashlib.sha256(payload).hexdigest() != entry.get("sha256"):
            raise SnapshotError(f"corrupt snapshot: blob {i} checksum mismatch")
        arrays.append(tensor_from_bytes(payload, dtype, shape))

    return _restore_blobs(document["state"], arrays)


@timed("snapshot_write")
def write_snapshot(path: PathLike, state: Dict[str, Any]) -> Path:
    """Atomically write a snapshot (temp file in the same directory, then rename)."""
    path = Path(path)
    payload = encode_snapshot(state)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=str(path.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    logger.info(
        f"Snapshot written ({len(payload)} bytes)",
        extra={"event": "snapshot_written", "path": str(path)},
    )
    return path


def read_snapshot(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise SnapshotError(f"cannot read snapshot {path}: {e}") from e
    return decode_snapshot(data)
