"""Length-prefixed binary protocol between the client (bottom model) and the server (top model).

Frame layout, little-endian::

    b"SINF" | u8 version | u8 type | u32 payload length | payload

Types: 1 = REQUEST (payload: tensor), 2 = RESPONSE (payload: tensor of
logits), 3 = ERROR (payload: u8 code + UTF-8 message).

Tensor encoding: u8 rank | rank x u32 dims | float32 data (C order).
"""

from __future__ import annotations

import logging
import math
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"SINF"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
MAX_PAYLOAD = 64 * 1024 * 1024
MAX_RANK = 8

REQUEST, RESPONSE, ERROR = 1, 2, 3
FRAME_TYPES = (REQUEST, RESPONSE, ERROR)

# error codes
BAD_MAGIC = 1
UNSUPPORTED_VERSION = 2
UNKNOWN_TYPE = 3
LENGTH_MISMATCH = 4
BAD_TENSOR = 5
SHAPE_MISMATCH = 6
INTERNAL = 7
ERROR_NAMES = {BAD_MAGIC: "BAD_MAGIC", UNSUPPORTED_VERSION: "UNSUPPORTED_VERSION", UNKNOWN_TYPE: "UNKNOWN_TYPE",
               LENGTH_MISMATCH: "LENGTH_MISMATCH", BAD_TENSOR: "BAD_TENSOR", SHAPE_MISMATCH: "SHAPE_MISMATCH",
               INTERNAL: "INTERNAL"}


class ProtocolError(ValueError):
    def __init__(self, code: int, message: str):
        super().__init__(f"{ERROR_NAMES.get(code, code)}: {message}")
        self.code = code
        self.message = message


class RemoteError(RuntimeError):
    """The peer answered with an ERROR frame."""

    def __init__(self, code: int, message: str):
        super().__init__(f"server error {ERROR_NAMES.get(code, code)}: {message}")
        self.code = code
        self.message = message


@dataclass(frozen=True)
class Frame:
    type: int
    payload: bytes
    version: int = VERSION


# -- tensors ----------------------------------------------------------------------

def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim > MAX_RANK:
        raise ValueError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
    data = np.ascontiguousarray(arr, dtype="<f4")
    return struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape) + data.tobytes()


def decode_tensor(payload: bytes) -> np.ndarray:
    if len(payload) < 1:
        raise ProtocolError(BAD_TENSOR, "empty tensor payload")
    rank = payload[0]
    if rank > MAX_RANK:
        raise ProtocolError(BAD_TENSOR, f"rank {rank} exceeds {MAX_RANK}")
    head = 1 + 4 * rank
    if len(payload) < head:
        raise ProtocolError(BAD_TENSOR, f"tensor header needs {head} bytes, got {len(payload)}")
    dims = struct.unpack_from(f"<{rank}I", payload, 1)
    count = math.prod(dims)
    if len(payload) - head != 4 * count:
        raise ProtocolError(BAD_TENSOR, f"shape {dims} needs {4 * count} data bytes, got {len(payload) - head}")
    arr = np.frombuffer(payload, dtype="<f4", offset=head, count=count).reshape(dims)
    if not np.isfinite(arr).all():
        raise ProtocolError(BAD_TENSOR, "tensor contains non-finite values")
    return arr.astype(np.float32)


def encode_error(code: int, message: str) -> bytes:
    return encode_frame(Frame(ERROR, struct.pack("<B", code) + message.encode("utf-8")[:4096]))


def decode_error(payload: bytes) -> tuple[int, str]:
    if not payload:
        raise ProtocolError(LENGTH_MISMATCH, "error frame has no code")
    return payload[0], payload[1:].decode("utf-8", errors="replace")


# -- frames -----------------------------------------------------------------------

def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise ValueError("payload too large")
    return HEADER.pack(MAGIC, frame.version, frame.type, len(frame.payload)) + frame.payload


def _check_header(raw: bytes) -> tuple[int, int, int]:
    magic, version, ftype, length = HEADER.unpack(raw)
    if magic != MAGIC:
        raise ProtocolError(BAD_MAGIC, f"bad magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(UNSUPPORTED_VERSION, f"version {version}, expected {VERSION}")
    if ftype not in FRAME_TYPES:
        raise ProtocolError(UNKNOWN_TYPE, f"frame type {ftype}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(LENGTH_MISMATCH, f"declared length {length} exceeds limit")
    return version, ftype, length


def decode_frame(raw: bytes) -> Frame:
    """Decode exactly one complete frame; any malformation raises ``ProtocolError``."""
    if len(raw) < HEADER.size:
        raise ProtocolError(LENGTH_MISMATCH, f"truncated header: {len(raw)} of {HEADER.size} bytes")
    version, ftype, length = _check_header(raw[:HEADER.size])
    if len(raw) - HEADER.size != length:
        raise ProtocolError(LENGTH_MISMATCH, f"declared payload {length} bytes, got {len(raw) - HEADER.size}")
    payload = bytes(raw[HEADER.size:])
    if ftype in (REQUEST, RESPONSE):
        decode_tensor(payload)
    elif ftype == ERROR and not payload:
        raise ProtocolError(LENGTH_MISMATCH, "error frame has no code")
    return Frame(ftype, payload, version)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None if not buf else bytes(buf)
        buf += chunk
    return bytes(buf)


def read_frame(sock: socket.socket) -> Frame | None:
    """Read one frame from a stream; ``None`` on clean EOF before a header.

    The declared payload is consumed before version and type are checked, so
    a well-delimited but unsupported frame leaves the stream in sync.
    """
    head = _recv_exact(sock, HEADER.size)
    if head is None:
        return None
    if len(head) < HEADER.size:
        raise ProtocolError(LENGTH_MISMATCH, "connection closed inside a frame header")
    magic, _, _, length = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(BAD_MAGIC, f"bad magic {magic!r}")
    if length > MAX_PAYLOAD:
        raise ProtocolError(LENGTH_MISMATCH, f"declared length {length} exceeds limit")
    payload = _recv_exact(sock, length) if length else b""
    if length and (payload is None or len(payload) < length):
        raise ProtocolError(LENGTH_MISMATCH, "connection closed inside a frame payload")
    return decode_frame(head + payload)


# -- server -----------------------------------------------------------------------

class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        infer = self.server.infer_fn
        expected = self.server.z_shape
        while True:
            try:
                frame = read_frame(sock)
            except ProtocolError as exc:
                sock.sendall(encode_error(exc.code, exc.message))
                if exc.code in (BAD_MAGIC, LENGTH_MISMATCH):
                    return  # stream can no longer be resynchronized
                continue
            except OSError:
                return
            if frame is None:
                return
            if frame.type != REQUEST:
                sock.sendall(encode_error(UNKNOWN_TYPE, f"server accepts only requests, got type {frame.type}"))
                continue
            z = decode_tensor(frame.payload)
            if expected is not None and tuple(z.shape[1:]) != tuple(expected):
                sock.sendall(encode_error(SHAPE_MISMATCH, f"expected (N,{','.join(map(str, expected))}), "
                                                          f"got {tuple(z.shape)}"))
                continue
            try:
                logits = infer(z.astype(np.float64))
                sock.sendall(encode_frame(Frame(RESPONSE, encode_tensor(logits))))
            except Exception as exc:  # reported to the client, server keeps running
                log.exception("inference failed")
                sock.sendall(encode_error(INTERNAL, f"{type(exc).__name__}: {exc}"))


class InferenceServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, infer_fn: Callable[[np.ndarray], np.ndarray], z_shape=None):
        self.infer_fn = infer_fn
        self.z_shape = tuple(z_shape) if z_shape is not None else None
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


def serve(address, infer_fn, z_shape=None, background: bool = False) -> InferenceServer:
    """Start a threaded server; with ``background`` it runs in a daemon thread and returns at once."""
    server = InferenceServer(parse_address(address) if isinstance(address, str) else address, infer_fn, z_shape)
    if background:
        threading.Thread(target=server.serve_forever, daemon=True).start()
    else:
        server.serve_forever()
    return server


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must look like host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


# -- client -----------------------------------------------------------------------

class InferenceClient:
    def __init__(self, address, timeout: float = 30.0):
        addr = parse_address(address) if isinstance(address, str) else address
        self.sock = socket.create_connection(addr, timeout=timeout)

    def request(self, z: np.ndarray) -> np.ndarray:
        self.sock.sendall(encode_frame(Frame(REQUEST, encode_tensor(z))))
        frame = read_frame(self.sock)
        if frame is None:
            raise ConnectionError("server closed the connection")
        if frame.type == ERROR:
            raise RemoteError(*decode_error(frame.payload))
        if frame.type != RESPONSE:
            raise ProtocolError(UNKNOWN_TYPE, f"unexpected frame type {frame.type}")
        return decode_tensor(frame.payload)

    def send_raw(self, raw: bytes) -> Frame | None:
        self.sock.sendall(raw)
        return read_frame(self.sock)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_infer(pipeline, x: np.ndarray, address, seed: int = 0, batch_size: int = 256
                 ) -> tuple[np.ndarray, np.ndarray]:
    """Run the bottom pipeline locally and the top remotely; returns (labels, logits)."""
    from .datasets import iterate_batches

    rng = np.random.default_rng([seed, 0x1F])
    logits = []
    with InferenceClient(address) as client:
        for idx in iterate_batches(len(x), batch_size):
            logits.append(client.request(pipeline.client_forward(x[idx], rng)))
    out = np.concatenate(logits) if logits else np.zeros((0, 0), np.float32)
    return np.argmax(out, axis=1), out


def local_infer(pipeline, top, x: np.ndarray, seed: int = 0, batch_size: int = 256
                ) -> tuple[np.ndarray, np.ndarray]:
    """In-process reference for ``client_infer``: same noise stream, f64 throughout."""
    from .datasets import iterate_batches
    from .engine import Tensor, no_grad

    rng = np.random.default_rng([seed, 0x1F])
    logits = []
    with no_grad():
        for idx in iterate_batches(len(x), batch_size):
            logits.append(top(Tensor(pipeline.client_forward(x[idx], rng))).data)
    out = np.concatenate(logits) if logits else np.zeros((0, 0))
    return np.argmax(out, axis=1), out


def top_infer_fn(top) -> Callable[[np.ndarray], np.ndarray]:
    from .engine import Tensor, no_grad

    def infer(z: np.ndarray) -> np.ndarray:
        with no_grad():
            return top(Tensor(z)).data

    return infer
