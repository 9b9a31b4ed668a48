"""Client for a remote guidance worker.

The client keeps one connection, sends one request at a time, and maps
protocol errors onto :class:`OracleError`. Connection setup resolves the
endpoint from the argument or the ``IMPASTO_ENDPOINT`` environment
variable.
"""

from __future__ import annotations

import os

import numpy as np

from ..errors import InvalidInputError, OracleError
from .base import (
    Capability,
    GuidanceOracle,
    LspResult,
    LspSpec,
    MaskedLoss,
    check_roundtrip_steps,
    require_finite,
)
from . import wire

ENDPOINT_ENV = "IMPASTO_ENDPOINT"


def resolve_endpoint(endpoint: str | None) -> str:
    endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
    if not endpoint:
        raise InvalidInputError(
            f"no worker endpoint given and {ENDPOINT_ENV} is not set"
        )
    return endpoint


class RemoteOracle(GuidanceOracle):
    """Guidance oracle backed by a worker process over the wire protocol."""

    def __init__(self, endpoint: str | None = None, timeout: float | None = 600.0):
        self.endpoint = resolve_endpoint(endpoint)
        self._sock = wire.connect(self.endpoint, timeout)

    def capabilities(self) -> frozenset[Capability]:
        return frozenset(Capability)

    def close(self) -> None:
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def _request(self, header: dict, arrays: list[np.ndarray]):
        if self._sock is None:
            raise OracleError("oracle session is closed")
        self._sock.sendall(wire.pack_frame(header, arrays))
        resp, out = wire.read_frame(self._sock)
        if resp.get("status") != "ok":
            raise OracleError(
                f"worker rejected {header.get('op')}: {resp.get('message', 'unknown error')}"
            )
        return resp, out

    def eval_lsp(self, xhat: np.ndarray, spec: LspSpec) -> LspResult:
        xhat = np.asarray(xhat, dtype=np.float64)
        arrays = [xhat]
        if spec.lambda_e > 0:
            arrays.append(np.asarray(spec.target.data, dtype=np.float64))
        resp, out = self._request(
            {
                "op": "eval_lsp",
                "lambda_e": spec.lambda_e,
                "lambda_sd": spec.lambda_sd,
                "seed": spec.seed,
            },
            arrays,
        )
        if len(out) != 1 or out[0].shape != xhat.shape:
            raise OracleError("worker returned a malformed gradient")
        require_finite("lsp gradient", out[0])
        return LspResult(
            loss=float(resp["loss"]),
            grad=out[0],
            loss_e=resp.get("loss_e"),
            loss_sd=resp.get("loss_sd"),
        )

    def diffusion_roundtrip(
        self, x: np.ndarray, t: int = 5, total: int = 25, seed: int = 0
    ) -> np.ndarray:
        check_roundtrip_steps(t, total)
        x = np.asarray(x, dtype=np.float64)
        _, out = self._request(
            {"op": "diffusion_roundtrip", "t": t, "T": total, "seed": seed}, [x]
        )
        if len(out) != 1 or out[0].shape != x.shape:
            raise OracleError("worker returned a malformed roundtrip image")
        require_finite("roundtrip image", out[0])
        return out[0]

    def spatial_distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise InvalidInputError("images must share the same extent")
        _, out = self._request({"op": "spatial_distance"}, [a, b])
        if len(out) != 1 or out[0].shape != a.shape[:2]:
            raise OracleError("worker returned a malformed distance map")
        require_finite("distance map", out[0])
        return out[0]

    def masked_lpips(
        self, x: np.ndarray, xhat: np.ndarray, mask: np.ndarray
    ) -> MaskedLoss:
        x = np.asarray(x, dtype=np.float64)
        xhat = np.asarray(xhat, dtype=np.float64)
        mask = np.asarray(mask, dtype=np.float64)
        resp, out = self._request({"op": "lpips_masked"}, [x, xhat, mask])
        if len(out) != 1 or out[0].shape != xhat.shape:
            raise OracleError("worker returned a malformed feature gradient")
        require_finite("feature gradient", out[0])
        return MaskedLoss(float(resp["loss"]), out[0])

    def clip_alignment(self, xhat: np.ndarray, prompt: str = "Noise-free image") -> MaskedLoss:
        xhat = np.asarray(xhat, dtype=np.float64)
        resp, out = self._request({"op": "clip_align", "prompt": prompt}, [xhat])
        if len(out) != 1 or out[0].shape != xhat.shape:
            raise OracleError("worker returned a malformed alignment gradient")
        require_finite("alignment gradient", out[0])
        return MaskedLoss(float(resp["loss"]), out[0])
