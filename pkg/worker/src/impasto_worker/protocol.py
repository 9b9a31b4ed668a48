"""Server-side framing for the guidance wire protocol.

Frames are: 4-byte little-endian header length, UTF-8 JSON header, then a
payload of concatenated tensors (32-bit little-endian floats, row-major,
channel-last, shapes declared in the header). The payload byte length is
therefore fixed by the header: 4 * sum(prod(shape) for shape in shapes).

An unknown or malformed operation is decided from the header alone; the
declared payload is drained so the connection stays usable. A header that
cannot be decoded makes the stream untrustworthy and closes the
connection.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

MAX_HEADER_BYTES = 1 << 20
KNOWN_OPS = (
    "eval_lsp",
    "diffusion_roundtrip",
    "spatial_distance",
    "clip_align",
    "lpips_masked",
)

_LEN = struct.Struct("<I")


class ConnectionClosed(Exception):
    pass


class FramingError(Exception):
    """Unrecoverable stream corruption; the connection must be dropped."""


def recv_exact(sock, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            raise ConnectionClosed
        buf.extend(chunk)
    return bytes(buf)


def payload_bytes(shapes) -> int:
    return 4 * sum(int(math.prod(shape)) for shape in shapes)


def read_header(sock) -> dict:
    (head_len,) = _LEN.unpack(recv_exact(sock, 4))
    if head_len > MAX_HEADER_BYTES:
        raise FramingError(f"header length {head_len} exceeds limit")
    raw = recv_exact(sock, head_len)
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"undecodable header: {exc}") from exc
    if not isinstance(header, dict):
        raise FramingError("header is not a JSON object")
    return header


def read_arrays(sock, shapes) -> list[np.ndarray]:
    arrays = []
    for shape in shapes:
        count = int(math.prod(shape)) if shape else 1
        raw = recv_exact(sock, 4 * count)
        arrays.append(np.frombuffer(raw, dtype="<f4").reshape(shape))
    return arrays


def drain_payload(sock, shapes) -> None:
    remaining = payload_bytes(shapes)
    while remaining > 0:
        chunk = sock.recv(min(remaining, 1 << 20))
        if not chunk:
            raise ConnectionClosed
        remaining -= len(chunk)


def pack_response(header: dict, arrays: list[np.ndarray]) -> bytes:
    header = dict(header, shapes=[list(a.shape) for a in arrays])
    head = json.dumps(header).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    return _LEN.pack(len(head)) + head + payload


def error_response(message: str) -> bytes:
    return pack_response({"status": "error", "message": message}, [])
