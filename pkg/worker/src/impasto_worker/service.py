"""Request dispatch and the long-running socket service.

One connection handles one request at a time, strictly request then
response; independent connections share the (read-only) model suite.
Every response passes a finiteness gate: a NaN or Inf anywhere turns the
reply into a status=error frame.
"""

from __future__ import annotations

import logging
import os
import socket
import socketserver
import threading

import numpy as np

from . import protocol
from .models import ModelSuite

log = logging.getLogger("impasto_worker")

ENDPOINT_ENV = "WORKER_ENDPOINT"


def resolve_endpoint(endpoint: str | None) -> str:
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise ValueError(f"no endpoint given and {ENDPOINT_ENV} is not set")
    return endpoint


def _is_image(arr: np.ndarray) -> bool:
    return (
        arr.ndim == 3
        and arr.shape[2] in (1, 3)
        and min(arr.shape[:2]) >= 16
        and bool(np.isfinite(arr).all())
    )


class GuidanceService:
    """Maps protocol requests onto the model suite."""

    def __init__(self, suite: ModelSuite):
        self.suite = suite

    def handle(self, header: dict, arrays: list[np.ndarray]) -> bytes:
        op = header.get("op")
        try:
            handler = getattr(self, f"_op_{op}")
            resp_header, out = handler(header, arrays)
        except Exception as exc:
            log.warning("request %s failed: %s", op, exc)
            return protocol.error_response(f"{type(exc).__name__}: {exc}")
        for arr in out:
            if not np.all(np.isfinite(arr)):
                return protocol.error_response(f"{op}: non-finite values in result")
        for key, value in resp_header.items():
            if isinstance(value, float) and not np.isfinite(value):
                return protocol.error_response(f"{op}: non-finite {key}")
        resp_header["status"] = "ok"
        return protocol.pack_response(resp_header, out)

    @staticmethod
    def _f64(arr: np.ndarray) -> np.ndarray:
        return np.asarray(arr, dtype=np.float64)

    def _op_eval_lsp(self, header, arrays):
        lambda_e = float(header.get("lambda_e", 1.0))
        lambda_sd = float(header.get("lambda_sd", 0.0))
        seed = int(header.get("seed", 0))
        if lambda_e < 0 or lambda_sd < 0 or (lambda_e == 0 and lambda_sd == 0):
            raise ValueError("invalid loss weights")
        expected = 2 if lambda_e > 0 else 1
        if len(arrays) != expected:
            raise ValueError(f"eval_lsp expects {expected} tensors, got {len(arrays)}")
        xhat = self._f64(arrays[0])
        target = self._f64(arrays[1]) if lambda_e > 0 else None
        if not _is_image(xhat) or (target is not None and target.shape != xhat.shape):
            raise ValueError("eval_lsp inputs must be matching HxWxC images")
        loss, loss_e, loss_sd, grad = self.suite.eval_lsp(
            xhat, target, lambda_e, lambda_sd, seed
        )
        header_out = {"loss": loss, "loss_e": loss_e, "loss_sd": loss_sd}
        header_out.update(self._resize_note(xhat))
        return header_out, [grad]

    def _op_diffusion_roundtrip(self, header, arrays):
        if len(arrays) != 1 or not _is_image(self._f64(arrays[0])):
            raise ValueError("diffusion_roundtrip expects one HxWxC image")
        t = int(header.get("t", 5))
        total = int(header.get("T", 25))
        seed = int(header.get("seed", 0))
        x = self._f64(arrays[0])
        out = self.suite.diffusion_roundtrip(x, t, total, seed)
        return dict(self._resize_note(x)), [out]

    def _op_spatial_distance(self, header, arrays):
        if len(arrays) != 2:
            raise ValueError("spatial_distance expects two tensors")
        a, b = (self._f64(arr) for arr in arrays)
        if not _is_image(a) or a.shape != b.shape:
            raise ValueError("spatial_distance inputs must be matching images")
        return dict(self._resize_note(a)), [self.suite.spatial_distance(a, b)]

    def _op_clip_align(self, header, arrays):
        if len(arrays) != 1 or not _is_image(self._f64(arrays[0])):
            raise ValueError("clip_align expects one HxWxC image")
        prompt = str(header.get("prompt", "Noise-free image"))
        xhat = self._f64(arrays[0])
        loss, grad = self.suite.clip_align(xhat, prompt)
        header_out = {"loss": loss}
        header_out.update(self._resize_note(xhat))
        return header_out, [grad]

    def _op_lpips_masked(self, header, arrays):
        if len(arrays) != 3:
            raise ValueError("lpips_masked expects x, xhat, mask")
        x, xhat, mask = (self._f64(arr) for arr in arrays)
        if not _is_image(x) or x.shape != xhat.shape or mask.shape != x.shape[:2]:
            raise ValueError("lpips_masked inputs are inconsistent")
        loss, grad = self.suite.lpips_masked(x, xhat, mask)
        header_out = {"loss": loss}
        header_out.update(self._resize_note(x))
        return header_out, [grad]

    def _resize_note(self, arr: np.ndarray) -> dict:
        h, w = arr.shape[:2]
        if (h, w) == (self.suite.size, self.suite.size):
            return {}
        return {"meta": {"resized_from": [h, w], "worked_at": self.suite.size}}


def serve_connection(sock: socket.socket, service: GuidanceService) -> None:
    """Request/response loop for one connection."""
    while True:
        try:
            header = protocol.read_header(sock)
        except protocol.ConnectionClosed:
            return
        except protocol.FramingError as exc:
            # stream can no longer be trusted
            try:
                sock.sendall(protocol.error_response(str(exc)))
            except OSError:
                pass
            return
        shapes = header.get("shapes", [])
        op = header.get("op")
        if op not in protocol.KNOWN_OPS:
            # decided before touching the payload; drain it to keep framing
            try:
                protocol.drain_payload(sock, shapes)
            except protocol.ConnectionClosed:
                return
            sock.sendall(protocol.error_response(f"unknown op: {op!r}"))
            continue
        try:
            arrays = protocol.read_arrays(sock, shapes)
        except (protocol.ConnectionClosed, ValueError):
            return
        sock.sendall(service.handle(header, arrays))


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        serve_connection(self.request, self.server.service)


class _TcpServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _UnixServer(socketserver.ThreadingUnixStreamServer):
    daemon_threads = True


class WorkerServer:
    """Socket server bound to ``host:port`` or a unix socket path."""

    def __init__(self, endpoint: str, suite: ModelSuite):
        self.endpoint = endpoint
        service = GuidanceService(suite)
        host, sep, port = endpoint.rpartition(":")
        if sep and port.isdigit():
            self._server = _TcpServer((host or "127.0.0.1", int(port)), _Handler)
        else:
            if os.path.exists(endpoint):
                os.unlink(endpoint)
            self._server = _UnixServer(endpoint, _Handler)
        self._server.service = service

    @property
    def bound_endpoint(self) -> str:
        addr = self._server.server_address
        if isinstance(addr, tuple):
            return f"{addr[0]}:{addr[1]}"
        return str(addr)

    def serve_forever(self):
        log.info("serving on %s", self.bound_endpoint)
        self._server.serve_forever()

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        thread.start()
        return thread

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
