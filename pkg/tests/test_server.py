"""
Tests for the batch server wire protocol and the client stream.

Run with: pytest tests/test_server.py -v
"""

import socket
import struct
import threading

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings

from core.api_retry import RetryConfig
from core.context import StreamSignal
from core.errors import FrameDecodeError, HandshakeError, ProtocolError, ServerError, StreamError
from core.pipeline import build_pipeline
from core.server import (
    HANDSHAKE,
    ClientStream,
    FrameType,
    decode_frame,
    encode_frame,
    read_frame,
    serve,
)
from tests.conftest import pipeline_specs

# {"features": [[1.0, 2.0]]} as f64, assembled by hand from the frame layout.
GOLDEN_ITEM_FRAME = bytes.fromhex(
    "25000000"                      # length 37 = type byte + 36 payload bytes
    "01"                            # ITEM
    "01"                            # one source
    "08" + b"features".hex() +      # name
    "02"                            # f64
    "02" "01000000" "02000000"      # ndim 2, dims [1, 2]
    "000000000000f03f"              # 1.0
    "0000000000000040"              # 2.0
)

NO_RETRY = RetryConfig(max_attempts=1, jitter=False)


def _spec(container, num_epochs=2, **scheme):
    return {
        "container": str(container),
        "split": "train",
        "scheme": {"kind": "sequential", "batch_size": 1, **scheme},
        "num_epochs": num_epochs,
    }


@pytest.fixture
def server_factory():
    """Start servers and make sure none outlives the test."""
    started = []

    def start(spec):
        server = serve(spec, port=0)
        started.append(server)
        return server

    yield start
    for server in started:
        server.terminate()


def _raw_client(server):
    sock = socket.create_connection((server.host, server.port), timeout=30)
    assert sock.recv(len(HANDSHAKE), socket.MSG_WAITALL) == HANDSHAKE
    return sock


class TestFrameCodec:
    """Tests for encode_frame / decode_frame."""

    def test_golden_item(self):
        """A one-source f64 item encodes to the hand-assembled bytes."""
        item = {"features": np.array([[1.0, 2.0]])}
        assert encode_frame(item) == GOLDEN_ITEM_FRAME
        decoded = decode_frame(GOLDEN_ITEM_FRAME)
        np.testing.assert_array_equal(decoded["features"], item["features"])
        assert decoded["features"].dtype == np.float64

    def test_epoch_end_is_five_bytes(self):
        """EPOCH_END is length 1 plus type 0x02."""
        assert encode_frame(StreamSignal.EPOCH_END) == b"\x01\x00\x00\x00\x02"
        assert decode_frame(b"\x01\x00\x00\x00\x02") is FrameType.EPOCH_END

    @pytest.mark.parametrize("frame_type,code", [
        (FrameType.CLOSE, 0x03), (FrameType.NEXT, 0x10), (FrameType.STOP, 0x11),
    ])
    def test_control_frames(self, frame_type, code):
        """Control frames carry no payload."""
        assert encode_frame(frame_type) == struct.pack("<IB", 1, code)

    def test_two_source_round_trip(self):
        """f64 features and u8 targets survive encoding."""
        item = {
            "features": np.arange(6, dtype=np.float64).reshape(3, 2),
            "targets": np.array([[0], [1], [1]], dtype=np.uint8),
        }
        decoded = decode_frame(encode_frame(item))
        assert list(decoded) == ["features", "targets"]
        for name in item:
            assert decoded[name].dtype == item[name].dtype
            np.testing.assert_array_equal(decoded[name], item[name])

    def test_truncated_item(self):
        """A truncated ITEM is an error, never a partial item."""
        with pytest.raises(FrameDecodeError):
            decode_frame(GOLDEN_ITEM_FRAME[:-3])

    def test_inconsistent_length(self):
        """The declared length must match the payload."""
        broken = struct.pack("<I", 40) + GOLDEN_ITEM_FRAME[4:]
        with pytest.raises(FrameDecodeError):
            decode_frame(broken)

    def test_unknown_frame_type(self):
        """Unknown frame types are rejected."""
        with pytest.raises(FrameDecodeError):
            decode_frame(b"\x01\x00\x00\x00\x7f")

    def test_unknown_dtype_code(self):
        """Unknown dtype codes are rejected."""
        broken = bytearray(GOLDEN_ITEM_FRAME)
        broken[4 + 1 + 1 + 1 + 8] = 0x09
        with pytest.raises(FrameDecodeError):
            decode_frame(bytes(broken))

    def test_oversized_dims(self):
        """Dims whose product overflows 64 bits are a decode error, not a wrapped size."""
        payload = b"\x01" + b"\x01x" + struct.pack("<BB", 0x01, 4) + struct.pack("<4I", *[0xFFFFFFFF] * 4)
        payload += b"\x00" * 16
        frame = struct.pack("<IB", len(payload) + 1, FrameType.ITEM) + payload
        with pytest.raises(FrameDecodeError, match="truncated"):
            decode_frame(frame)

    def test_unsupported_array_dtype(self):
        """Complex arrays have no wire code."""
        with pytest.raises(ProtocolError):
            encode_frame({"z": np.zeros(2, dtype=np.complex128)})

    def test_ragged_source_rejected(self):
        """Ragged (list) sources must be padded first."""
        with pytest.raises(ProtocolError):
            encode_frame({"tokens": [np.zeros(2), np.zeros(3)]})


class TestServer:
    """Tests against a live server process."""

    def test_stop_immediately(self, ramp_path, server_factory):
        """STOP right after the handshake is answered with CLOSE and a clean exit."""
        server = server_factory(_spec(ramp_path))
        with _raw_client(server) as sock:
            sock.sendall(encode_frame(FrameType.STOP))
            assert decode_frame(read_frame(sock)) is FrameType.CLOSE
        assert server.join(timeout=30) == 0

    def test_next_after_close(self, ramp_path, server_factory):
        """After CLOSE the connection ends without another frame."""
        server = server_factory(_spec(ramp_path, num_epochs=1, batch_size=3))
        with _raw_client(server) as sock:
            frames = []
            for _ in range(3):
                sock.sendall(encode_frame(FrameType.NEXT))
                frames.append(decode_frame(read_frame(sock)))
            assert isinstance(frames[0], dict)
            assert frames[1:] == [FrameType.EPOCH_END, FrameType.CLOSE]

            try:
                sock.sendall(encode_frame(FrameType.NEXT))
                assert read_frame(sock) is None
            except ConnectionResetError:
                pass
        assert server.join(timeout=30) == 0

    def test_sequence_mirrors_local(self, ramp_path, server_factory):
        """ITEM x3, EPOCH_END, then the second epoch, as the local stream does."""
        spec = _spec(ramp_path)
        local = build_pipeline(spec)
        expected = [local.get_next() for _ in range(9)]

        server = server_factory(spec)
        with ClientStream(server.host, server.port, retry_config=NO_RETRY) as remote:
            received = [remote.get_next() for _ in range(9)]

        kinds = ["item" if isinstance(x, dict) else x for x in received]
        assert kinds == ["item"] * 3 + [StreamSignal.EPOCH_END] + ["item"] * 3 + [
            StreamSignal.EPOCH_END, StreamSignal.EXHAUSTED,
        ]
        for a, b in zip(received, expected):
            if isinstance(a, dict):
                for name in a:
                    assert a[name].dtype == b[name].dtype
                    np.testing.assert_array_equal(a[name], b[name])
            else:
                assert a is b

    def test_shuffled_remote_equals_local(self, blobs_container, server_factory):
        """A seeded shuffled pipeline is bitwise identical over TCP."""
        spec = {
            "container": str(blobs_container),
            "split": "train",
            "backend": "out_of_core",
            "scheme": {"kind": "shuffled", "batch_size": 16, "seed": 7},
            "num_epochs": 1,
            "transformers": [{"kind": "mapping", "function": "scale_by", "params": {"factor": 0.5}}],
        }
        local = build_pipeline(spec)
        expected = [local.get_next() for _ in range(12)]

        server = server_factory(spec)
        with ClientStream(server.host, server.port, retry_config=NO_RETRY) as remote:
            received = [remote.get_next() for _ in range(12)]

        for a, b in zip(received, expected):
            if isinstance(a, dict):
                assert a["features"].tobytes() == b["features"].tobytes()
                assert a["targets"].tobytes() == b["targets"].tobytes()
            else:
                assert a is b

    @settings(max_examples=20, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(spec=pipeline_specs())
    def test_random_pipelines_remote_equals_local(self, mixed_container, server_factory, spec):
        """Random scheme/transformer chains, padding and ngrams included, are bitwise identical over TCP."""
        spec = {**spec, "container": str(mixed_container)}
        local = build_pipeline(spec)
        expected = [local.get_next()]
        while expected[-1] is not StreamSignal.EXHAUSTED:
            expected.append(local.get_next())

        server = server_factory(spec)
        with ClientStream(server.host, server.port, retry_config=NO_RETRY) as remote:
            received = [remote.get_next() for _ in expected]

        for a, b in zip(received, expected):
            if not isinstance(b, dict):
                assert a is b
                continue
            assert sorted(a) == sorted(b)
            for name in b:
                assert a[name].dtype == b[name].dtype
                assert a[name].shape == b[name].shape
                assert a[name].tobytes() == b[name].tobytes()

    def test_bad_pipeline_closes(self, ramp_path, server_factory):
        """A pipeline that cannot be built is reported with CLOSE after the handshake."""
        spec = _spec(ramp_path)
        spec["split"] = "nonexistent"
        server = server_factory(spec)
        with ClientStream(server.host, server.port, retry_config=NO_RETRY) as remote:
            assert remote.get_next() is StreamSignal.EXHAUSTED

    def test_port_in_use(self, ramp_path):
        """Binding an occupied port fails."""
        with socket.create_server(("127.0.0.1", 0)) as busy:
            port = busy.getsockname()[1]
            with pytest.raises(ServerError):
                serve(_spec(ramp_path), port=port)


class TestClientStream:
    """Tests for the client side."""

    def test_bad_handshake(self):
        """A peer with the wrong magic is rejected."""
        with socket.create_server(("127.0.0.1", 0)) as listener:
            port = listener.getsockname()[1]
            listener.settimeout(30)

            def greet():
                conn, _ = listener.accept()
                with conn:
                    conn.sendall(b"XXXXXXXX\x01\x00")
                    conn.recv(16)

            thread = threading.Thread(target=greet, daemon=True)
            thread.start()
            with pytest.raises(HandshakeError):
                ClientStream("127.0.0.1", port, retry_config=NO_RETRY)
            thread.join(timeout=30)

    def test_cannot_checkpoint(self, ramp_path, server_factory):
        """Server-backed streams refuse to save state."""
        server = server_factory(_spec(ramp_path))
        with ClientStream(server.host, server.port, retry_config=NO_RETRY) as remote:
            with pytest.raises(StreamError):
                remote.save_state()
