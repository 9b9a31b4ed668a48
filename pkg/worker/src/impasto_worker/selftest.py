"""Self-verification: three contract checks run through a loopback server.

Checks: the encoder objective vanishes at its minimizer (zero loss and
gradient), the perceptual distance of an image to itself is zero, and a
seeded loss evaluation is reproducible. Each check prints one PASS/FAIL
line; the entry point returns the number of failures.
"""

from __future__ import annotations

import socket

import numpy as np

from . import protocol
from .models import ModelSuite
from .service import WorkerServer


def _request(endpoint: str, header: dict, arrays: list[np.ndarray]):
    host, _, port = endpoint.rpartition(":")
    with socket.create_connection((host, int(port))) as sock:
        sock.sendall(protocol.pack_response(header, arrays))
        resp = protocol.read_header(sock)
        out = protocol.read_arrays(sock, resp.get("shapes", []))
    return resp, out


def run_selftest(seed: int = 0, size: int = 512) -> int:
    rng = np.random.default_rng(1234)
    y = rng.uniform(0.1, 0.9, size=(64, 64, 3)).astype(np.float32)
    a = rng.uniform(0.1, 0.9, size=(64, 64, 3)).astype(np.float32)

    server = WorkerServer("127.0.0.1:0", ModelSuite(seed=seed, size=size))
    server.start_background()
    endpoint = server.bound_endpoint
    failures = 0

    def report(name: str, ok: bool, detail: str):
        nonlocal failures
        print(f"[{'PASS' if ok else 'FAIL'}] {name}  ({detail})")
        failures += 0 if ok else 1

    try:
        resp, out = _request(
            endpoint,
            {"op": "eval_lsp", "lambda_e": 1.0, "lambda_sd": 0.0, "seed": 0},
            [y, y],
        )
        ok = (
            resp["status"] == "ok"
            and resp["loss"] == 0.0
            and np.abs(out[0]).max() == 0.0
        )
        report(
            "encoder objective vanishes at its minimizer",
            ok,
            f"loss {resp.get('loss')}, max |grad| {np.abs(out[0]).max():.3g}",
        )

        resp, out = _request(endpoint, {"op": "spatial_distance"}, [a, a])
        worst = float(np.abs(out[0]).max())
        report(
            "self perceptual distance is zero",
            resp["status"] == "ok" and worst < 1e-4,
            f"max {worst:.3g}",
        )

        xhat = (a + 0.01).astype(np.float32)
        first, g1 = _request(
            endpoint,
            {"op": "eval_lsp", "lambda_e": 1.0, "lambda_sd": 1.0, "seed": 42},
            [xhat, y],
        )
        second, g2 = _request(
            endpoint,
            {"op": "eval_lsp", "lambda_e": 1.0, "lambda_sd": 1.0, "seed": 42},
            [xhat, y],
        )
        loss_gap = abs(first["loss"] - second["loss"])
        grad_gap = float(np.abs(g1[0] - g2[0]).max())
        report(
            "seeded evaluation is reproducible",
            loss_gap < 1e-5 and grad_gap < 1e-5,
            f"loss gap {loss_gap:.3g}, grad gap {grad_gap:.3g}",
        )
    finally:
        server.shutdown()
    return failures
