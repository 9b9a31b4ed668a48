"""Framing for the guidance-worker wire protocol.

One frame is: a 4-byte little-endian unsigned header length, a UTF-8 JSON
header, then a raw payload of zero or more tensors. Tensors travel as
32-bit little-endian floats, row-major, channel-last; their shapes are
declared in the header's ``shapes`` list, so the payload byte length is
always 4 * sum(product(shape)).
"""

from __future__ import annotations

import json
import socket
import struct

import numpy as np

from ..errors import OracleError

MAX_HEADER_BYTES = 1 << 20

_LEN = struct.Struct("<I")


def pack_frame(header: dict, arrays: list[np.ndarray]) -> bytes:
    shapes = [list(a.shape) for a in arrays]
    header = dict(header, shapes=shapes)
    head = json.dumps(header).encode("utf-8")
    if len(head) > MAX_HEADER_BYTES:
        raise OracleError("header too large")
    payload = b"".join(
        np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays
    )
    return _LEN.pack(len(head)) + head + payload


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise OracleError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> tuple[dict, list[np.ndarray]]:
    (head_len,) = _LEN.unpack(_recv_exact(sock, 4))
    if head_len > MAX_HEADER_BYTES:
        raise OracleError(f"header length {head_len} exceeds the limit")
    try:
        header = json.loads(_recv_exact(sock, head_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise OracleError(f"malformed frame header: {exc}") from exc
    shapes = header.get("shapes", [])
    arrays = []
    for shape in shapes:
        count = int(np.prod(shape)) if shape else 1
        raw = _recv_exact(sock, 4 * count)
        arrays.append(
            np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        )
    return header, arrays


def connect(endpoint: str, timeout: float | None = None) -> socket.socket:
    """Open a client socket; ``host:port`` means TCP, anything else a unix path."""
    host, sep, port = endpoint.rpartition(":")
    if sep and port.isdigit():
        sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    else:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        if timeout is not None:
            sock.settimeout(timeout)
        sock.connect(endpoint)
    return sock
