"""
Batch server: runs a pipeline in its own process and serves items over TCP.

Wire protocol (all integers little-endian):

    frame     = u32 length (bytes after this field) | u8 type | payload
    ITEM      = u8 source_count, then per source:
                u8 name_len | name (UTF-8) | u8 dtype code | u8 ndim |
                ndim x u32 dims | raw row-major data
    EPOCH_END, CLOSE, NEXT, STOP carry no payload.

On accept the server sends the 8-byte magic plus a u16 version, then
answers every NEXT with exactly one ITEM, EPOCH_END or CLOSE. It computes
at most one item ahead of the client.

Usage:
    server = serve(spec, port=0)
    with ClientStream("127.0.0.1", server.port) as stream:
        item = stream.get_next()
    server.join()
"""

import multiprocessing
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from multiprocessing.connection import Connection
from typing import Any, Dict, List, Optional, Union

import numpy as np

from config.settings import PROTOCOL_MAGIC, PROTOCOL_VERSION
from core.api_retry import DEFAULT_CONNECT_RETRY, RetryConfig, RetryHandler
from core.binary import DTYPES, DTYPES_BY_CODE, dtype_name_of, num_bytes, tensor_from_bytes, tensor_to_bytes
from core.context import StreamSignal
from core.errors import (
    ContractViolation,
    FrameDecodeError,
    HandshakeError,
    KilnError,
    ProtocolError,
    ServerError,
    StreamError,
)
from core.pipeline import PipelineSpec, build_pipeline
from core.stream import Item, Pull, Stream, StreamState
from core.structured_logging import get_logger

logger = get_logger(__name__)

HANDSHAKE = PROTOCOL_MAGIC + struct.pack("<H", PROTOCOL_VERSION)
MAX_U32 = (1 << 32) - 1


class FrameType(IntEnum):
    ITEM = 0x01
    EPOCH_END = 0x02
    CLOSE = 0x03
    NEXT = 0x10
    STOP = 0x11


Frame = Union[Item, FrameType]


# =============================================================================
# Codec
# =============================================================================

def _encode_item(item: Item) -> bytes:
    if len(item) > 255:
        raise ProtocolError(f"an item carries at most 255 sources, got {len(item)}")
    parts = [struct.pack("<B", len(item))]
    for name, value in item.items():
        if isinstance(value, list):
            raise ProtocolError(f"source {name!r} is ragged; pad it before serving")
        array = np.asarray(value)
        encoded_name = name.encode("utf-8")
        if len(encoded_name) > 255:
            raise ProtocolError(f"source name {name!r} longer than 255 bytes")
        if array.ndim > 255:
            raise ProtocolError(f"source {name!r} has {array.ndim} dimensions")
        if any(d > MAX_U32 for d in array.shape):
            raise ProtocolError(f"source {name!r} dimension exceeds u32: {array.shape}")
        try:
            dtype = dtype_name_of(array)
        except ContractViolation as e:
            raise ProtocolError(str(e)) from e
        parts.append(struct.pack("<B", len(encoded_name)))
        parts.append(encoded_name)
        parts.append(struct.pack("<BB", DTYPES[dtype].wire_code, array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(tensor_to_bytes(array, dtype))
    return b"".join(parts)


def encode_frame(frame: Union[Frame, StreamSignal]) -> bytes:
    """
    Encode an item or a control frame.

    StreamSignal.EPOCH_END is accepted as a synonym for FrameType.EPOCH_END.
    """
    if frame is StreamSignal.EPOCH_END:
        frame = FrameType.EPOCH_END
    if isinstance(frame, FrameType):
        if frame is FrameType.ITEM:
            raise ProtocolError("ITEM frames are encoded from an item dict")
        payload, frame_type = b"", frame
    elif isinstance(frame, dict):
        payload, frame_type = _encode_item(frame), FrameType.ITEM
    else:
        raise ProtocolError(f"cannot encode {frame!r}")
    return struct.pack("<IB", len(payload) + 1, frame_type) + payload


class _Reader:
    def __init__(self, buffer: bytes):
        self.buffer = buffer
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.buffer):
            raise FrameDecodeError(f"truncated ITEM payload at byte {self.offset}")
        chunk = self.buffer[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_item(payload: bytes) -> Item:
    reader = _Reader(payload)
    (count,) = reader.unpack("<B")
    item: Item = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<B")
        try:
            name = reader.take(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FrameDecodeError(f"source name is not UTF-8: {e}") from e
        code, ndim = reader.unpack("<BB")
        if code not in DTYPES_BY_CODE:
            raise FrameDecodeError(f"unknown dtype code 0x{code:02x}")
        shape = reader.unpack(f"<{ndim}I")
        dtype = DTYPES_BY_CODE[code].name
        item[name] = tensor_from_bytes(reader.take(num_bytes(shape, dtype)), dtype, shape)
    if reader.offset != len(payload):
        raise FrameDecodeError(f"{len(payload) - reader.offset} trailing bytes after ITEM payload")
    return item


def decode_frame(data: bytes) -> Frame:
    """
    Decode exactly one complete frame.

    Returns:
        The item dict for ITEM frames, the FrameType otherwise

    Raises:
        FrameDecodeError: truncated buffer, unknown frame type or dtype
    """
    if len(data) < 5:
        raise FrameDecodeError(f"frame needs at least 5 bytes, got {len(data)}")
    (length,) = struct.unpack_from("<I", data)
    if len(data) != length + 4:
        raise FrameDecodeError(f"frame declares {length + 4} bytes, buffer has {len(data)}")
    try:
        frame_type = FrameType(data[4])
    except ValueError:
        raise FrameDecodeError(f"unknown frame type 0x{data[4]:02x}") from None
    payload = data[5:]
    if frame_type is FrameType.ITEM:
        return _decode_item(payload)
    if payload:
        raise FrameDecodeError(f"{frame_type.name} frame must have an empty payload")
    return frame_type


# =============================================================================
# Socket helpers
# =============================================================================

def _recv_exact(sock: socket.socket, n: int) -> bytes:
    """Up to n bytes; fewer only if the peer closed the connection."""
    data = bytearray()
    while len(data) < n:
        packet = sock.recv(n - len(data))
        if not packet:
            break
        data.extend(packet)
    return bytes(data)


def read_frame(sock: socket.socket) -> Optional[bytes]:
    """
    One complete raw frame, or None if the peer closed between frames.

    Raises:
        ProtocolError: connection closed mid-frame
    """
    prefix = _recv_exact(sock, 4)
    if not prefix:
        return None
    if len(prefix) < 4:
        raise ProtocolError("connection closed inside a frame length prefix")
    (length,) = struct.unpack("<I", prefix)
    body = _recv_exact(sock, length)
    if len(body) < length:
        raise ProtocolError(f"connection closed mid-frame ({len(body)} of {length} bytes)")
    return prefix + body


# =============================================================================
# Server process
# =============================================================================

def _handle_client(client: socket.socket, spec: PipelineSpec) -> None:
    client.sendall(HANDSHAKE)

    stream: Optional[Stream] = None
    try:
        stream = build_pipeline(spec)
    except KilnError as e:
        logger.error(f"Pipeline construction failed: {e}", extra={"event": "pipeline_failed"})

    ahead: Optional[Pull] = None
    while True:
        raw = read_frame(client)
        if raw is None:
            logger.info("Client disconnected", extra={"event": "client_disconnected"})
            return
        request = decode_frame(raw)
        if request is not FrameType.NEXT or stream is None:
            if request not in (FrameType.NEXT, FrameType.STOP):
                logger.warning(f"Unexpected frame {request!r}", extra={"event": "unexpected_frame"})
            client.sendall(encode_frame(FrameType.CLOSE))
            return

        pulled = ahead if ahead is not None else stream.get_next()
        ahead = None
        if pulled is StreamSignal.EXHAUSTED:
            client.sendall(encode_frame(FrameType.CLOSE))
            return
        client.sendall(encode_frame(pulled))
        ahead = stream.get_next()


def _serve_process(spec: PipelineSpec, host: str, port: int, ready: Connection) -> None:
    try:
        listener = socket.create_server((host, port))
    except OSError as e:
        ready.send(("error", f"cannot listen on {host}:{port}: {e}"))
        ready.close()
        return
    bound_port = listener.getsockname()[1]
    ready.send(("ready", bound_port))
    ready.close()
    logger.info(
        f"Serving on {host}:{bound_port}",
        extra={"event": "server_listening", "host": host, "port": bound_port},
    )

    with listener:
        client, address = listener.accept()
    logger.info(f"Client connected from {address[0]}", extra={"event": "client_connected"})
    with client:
        try:
            _handle_client(client, spec)
        except (KilnError, OSError) as e:
            logger.error(f"Serving failed: {e}", extra={"event": "server_failed", "error_type": type(e).__name__})


@dataclass
class ServerProcess:
    """Handle on a running server process."""
    process: multiprocessing.Process
    host: str
    port: int

    def join(self, timeout: Optional[float] = None) -> Optional[int]:
        self.process.join(timeout)
        return self.process.exitcode

    def terminate(self) -> None:
        if self.process.is_alive():
            self.process.terminate()
            self.process.join()

    @property
    def alive(self) -> bool:
        return self.process.is_alive()


def serve(
    pipeline_spec: PipelineSpec,
    port: int = 0,
    host: str = "127.0.0.1",
    ready_timeout: float = 30.0,
) -> ServerProcess:
    """
    Start a server process for one client.

    Args:
        pipeline_spec: Serializable pipeline description
        port: TCP port (0 = pick a free one; see ServerProcess.port)
        host: Interface to bind
        ready_timeout: Seconds to wait for the process to bind

    Raises:
        ServerError: the port could not be bound or the process did not start
    """
    parent_end, child_end = multiprocessing.Pipe(duplex=False)
    process = multiprocessing.Process(
        target=_serve_process,
        args=(pipeline_spec, host, port, child_end),
        name=f"kiln-server-{port}",
        daemon=True,
    )
    process.start()
    child_end.close()

    if not parent_end.poll(ready_timeout):
        process.terminate()
        raise ServerError(f"server process did not report readiness within {ready_timeout}s")
    try:
        status, detail = parent_end.recv()
    except EOFError:
        process.join()
        raise ServerError(f"server process exited with code {process.exitcode} before binding") from None
    finally:
        parent_end.close()
    if status != "ready":
        process.join()
        raise ServerError(detail)
    return ServerProcess(process=process, host=host, port=int(detail))


# =============================================================================
# Client
# =============================================================================

class ClientStream(Stream):
    """
    A remote pipeline seen as an ordinary stream.

    Server streams cannot be checkpointed: save_state and load_state raise.
    """

    kind = "client_stream"

    def __init__(
        self,
        host: str,
        port: int,
        retry_config: RetryConfig = DEFAULT_CONNECT_RETRY,
        timeout: Optional[float] = 60.0,
    ):
        self.host = host
        self.port = port
        self._sources: List[str] = []
        self._closed = False
        handler = RetryHandler(config=retry_config, operation_name=f"connect {host}:{port}")
        self._sock = handler.execute(
            lambda: socket.create_connection((host, port), timeout=timeout),
            raise_on_failure=True,
        )
        greeting = _recv_exact(self._sock, len(HANDSHAKE))
        if greeting != HANDSHAKE:
            self._sock.close()
            self._closed = True
            raise HandshakeError(f"unexpected handshake {greeting!r}, expected {HANDSHAKE!r}")

    @property
    def sources(self) -> List[str]:
        """Sources of the last item received (empty before the first)."""
        return list(self._sources)

    def get_next(self) -> Pull:
        if self._closed:
            return StreamSignal.EXHAUSTED
        self._sock.sendall(encode_frame(FrameType.NEXT))
        raw = read_frame(self._sock)
        if raw is None:
            self._shutdown()
            raise ProtocolError("server closed the connection without a frame")
        frame = decode_frame(raw)
        if isinstance(frame, dict):
            self._sources = list(frame)
            return frame
        if frame is FrameType.EPOCH_END:
            return StreamSignal.EPOCH_END
        if frame is FrameType.CLOSE:
            self._shutdown()
            return StreamSignal.EXHAUSTED
        self._shutdown()
        raise ProtocolError(f"unexpected {frame.name} frame from server")

    def _shutdown(self) -> None:
        self._closed = True
        self._sock.close()

    def close(self) -> None:
        """Send STOP and wait for the server's CLOSE."""
        if self._closed:
            return
        try:
            self._sock.sendall(encode_frame(FrameType.STOP))
            read_frame(self._sock)
        except (OSError, ProtocolError):
            pass
        finally:
            self._shutdown()

    def __enter__(self) -> "ClientStream":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()

    def save_state(self) -> StreamState:
        raise StreamError("server-backed streams cannot be checkpointed")

    def load_state(self, state: StreamState) -> None:
        raise StreamError("server-backed streams cannot be checkpointed")

    def _state(self) -> Dict[str, Any]:
        raise StreamError("server-backed streams cannot be checkpointed")

    def _load(self, state: Dict[str, Any]) -> None:
        raise StreamError("server-backed streams cannot be checkpointed")

    def _config(self) -> Dict[str, Any]:
        return {"host": self.host, "port": self.port}


def client_stream(host: str, port: int, retry_config: RetryConfig = DEFAULT_CONNECT_RETRY) -> ClientStream:
    return ClientStream(host, port, retry_config)
