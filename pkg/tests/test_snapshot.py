"""
Tests for snapshot files.

Run with: pytest tests/test_snapshot.py -v
"""

import json
import struct

import numpy as np
import pytest

from core.errors import SnapshotError
from core.snapshot import decode_snapshot, encode_snapshot, read_snapshot, write_snapshot


def sample_state():
    return {
        "status": {"iterations_done": 7, "training_finished": False},
        "parameters": {
            "/mlp/linear_0.W": np.arange(6, dtype=np.float64).reshape(2, 3),
            "/mlp/linear_0.b": np.array([0.5, -0.5, 0.0]),
        },
        "buffers": [{"velocity": {"w": np.zeros((1, 1))}}],
        "counts": np.array([1, 2, 3], dtype=np.int64),
        "scalar": np.float64(2.5),
        "nothing": None,
    }


def _header(data):
    (length,) = struct.unpack_from("<I", data, 8)
    return json.loads(data[12: 12 + length])


class TestEncoding:
    """Tests for the byte layout."""

    def test_magic_and_header(self):
        """Files start with the magic and a JSON header naming the format version."""
        data = encode_snapshot(sample_state())
        assert data[:8] == b"BFCK0001"
        header = _header(data)
        assert header["format_version"] == 1
        assert header["state"]["parameters"]["/mlp/linear_0.W"] == {"__blob__": 0}

    def test_blob_alignment(self):
        """Blobs sit at 64-aligned offsets from the first aligned byte after the header."""
        data = encode_snapshot(sample_state())
        header = _header(data)
        (length,) = struct.unpack_from("<I", data, 8)
        data_start = -(-(12 + length) // 64) * 64
        assert all(entry["offset"] % 64 == 0 for entry in header["blobs"])
        first = header["blobs"][0]
        blob = data[data_start + first["offset"]: data_start + first["offset"] + first["nbytes"]]
        assert blob == np.arange(6, dtype="<f8").tobytes()

    def test_round_trip(self):
        """Arrays keep dtype, shape and bits; scalars become plain values."""
        state = sample_state()
        restored = decode_snapshot(encode_snapshot(state))
        for key, value in state["parameters"].items():
            assert restored["parameters"][key].dtype == np.float64
            np.testing.assert_array_equal(restored["parameters"][key], value)
        assert restored["counts"].dtype == np.int64
        assert restored["scalar"] == 2.5 and isinstance(restored["scalar"], float)
        assert restored["status"] == state["status"]
        assert restored["nothing"] is None
        np.testing.assert_array_equal(restored["buffers"][0]["velocity"]["w"], np.zeros((1, 1)))

    def test_deterministic(self):
        """The same state always encodes to the same bytes."""
        assert encode_snapshot(sample_state()) == encode_snapshot(sample_state())

    def test_non_string_keys(self):
        """Tree keys must be strings."""
        with pytest.raises(SnapshotError):
            encode_snapshot({1: "one"})

    def test_unsupported_leaf(self):
        """Leaves other than arrays and JSON scalars are rejected."""
        with pytest.raises(SnapshotError):
            encode_snapshot({"s": {1, 2}})


class TestDecoding:
    """Tests for corruption detection."""

    def test_bad_magic(self):
        """Other files are rejected."""
        with pytest.raises(SnapshotError, match="magic"):
            decode_snapshot(b"BFDC0001" + b"\x00" * 8)

    def test_unsupported_version(self):
        """Newer format versions are refused."""
        data = encode_snapshot({"a": 1}).replace(b'"format_version":1', b'"format_version":9')
        with pytest.raises(SnapshotError, match="version"):
            decode_snapshot(data)

    def test_checksum_mismatch(self):
        """A flipped blob byte is detected."""
        data = bytearray(encode_snapshot(sample_state()))
        data[-1] ^= 0xFF
        with pytest.raises(SnapshotError, match="checksum"):
            decode_snapshot(bytes(data))

    def test_truncated(self):
        """Missing blob bytes are detected."""
        data = encode_snapshot(sample_state())
        with pytest.raises(SnapshotError):
            decode_snapshot(data[:-10])

    def test_header_past_end(self):
        """A header length beyond the file is corrupt."""
        data = b"BFCK0001" + struct.pack("<I", 1000) + b"{}"
        with pytest.raises(SnapshotError):
            decode_snapshot(data)


class TestFiles:
    """Tests for atomic writes."""

    def test_write_and_read(self, tmp_path):
        """A written snapshot reads back."""
        path = write_snapshot(tmp_path / "run" / "snap.bfck", sample_state())
        assert path.exists()
        assert read_snapshot(path)["status"]["iterations_done"] == 7

    def test_failed_write_keeps_previous(self, tmp_path):
        """An unserializable state leaves the existing file and no temp files."""
        path = write_snapshot(tmp_path / "snap.bfck", {"a": np.ones(2)})
        before = path.read_bytes()
        with pytest.raises(SnapshotError):
            write_snapshot(path, {"a": object()})
        assert path.read_bytes() == before
        assert [p.name for p in tmp_path.iterdir()] == ["snap.bfck"]

    def test_interrupted_rename_cleans_up(self, tmp_path, mocker):
        """If the rename fails the temp file is removed and the target kept."""
        path = write_snapshot(tmp_path / "snap.bfck", {"a": np.ones(2)})
        before = path.read_bytes()
        mocker.patch("core.snapshot.os.replace", side_effect=OSError("disk full"))
        with pytest.raises(OSError):
            write_snapshot(path, {"a": np.zeros(2)})
        assert path.read_bytes() == before
        assert [p.name for p in tmp_path.iterdir()] == ["snap.bfck"]

    def test_missing_file(self, tmp_path):
        """Unreadable paths raise SnapshotError."""
        with pytest.raises(SnapshotError):
            read_snapshot(tmp_path / "absent.bfck")
