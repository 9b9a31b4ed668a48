"""Guidance-oracle contract.

Everything neural lives behind this interface: style-protection loss
values and gradients, partial diffusion roundtrips, per-pixel perceptual
distances, mask-weighted feature losses, and prompt-alignment losses.
Two implementations ship with the package: a deterministic analytic
surrogate for desk-scale work and tests, and a remote client that speaks
the worker wire protocol.
"""

from __future__ import annotations

import abc
import enum
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidInputError, InvalidOracleError
from ..image import ImageTensor

#: Default partial-roundtrip depth: forward/reverse steps out of total steps.
DEFAULT_ROUNDTRIP_T = 5
DEFAULT_ROUNDTRIP_TOTAL = 25

#: Prompt used by the alignment constraint.
ALIGNMENT_PROMPT = "Noise-free image"


class Capability(enum.Enum):
    LSP_GRAD = "lsp_grad"
    LPIPS_FEATURES = "lpips_features"
    CLIP_EMBED = "clip_embed"
    DIFFUSION_ROUNDTRIP = "diffusion_roundtrip"
    SPATIAL_DISTANCE = "spatial_distance"


@dataclass(frozen=True)
class LspSpec:
    """How to mix the style-protection loss.

    ``lambda_e`` weights the encoder-distance term against the target
    image; ``lambda_sd`` weights the denoiser term. The loss returned by
    :meth:`GuidanceOracle.eval_lsp` is ``-lambda_e * L_E + lambda_sd * L_SD``.
    The seed fixes the denoiser term's timestep and noise draws, so equal
    (input, spec) pairs give equal results.
    """

    lambda_e: float = 1.0
    lambda_sd: float = 0.0
    target: ImageTensor | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lambda_e < 0 or self.lambda_sd < 0:
            raise InvalidInputError("loss weights must be non-negative")
        if self.lambda_e == 0 and self.lambda_sd == 0:
            raise InvalidInputError("at least one loss weight must be positive")
        if self.lambda_e > 0 and self.target is None:
            raise InvalidInputError("the encoder term requires a target image")


@dataclass(frozen=True)
class LspResult:
    """Mixed loss, its gradient w.r.t. the input, and the unmixed parts."""

    loss: float
    grad: np.ndarray
    loss_e: float | None = None
    loss_sd: float | None = None


@dataclass(frozen=True)
class MaskedLoss:
    loss: float
    grad: np.ndarray


class GuidanceOracle(abc.ABC):
    """One oracle session serves one protection run."""

    @abc.abstractmethod
    def capabilities(self) -> frozenset[Capability]:
        ...

    @abc.abstractmethod
    def eval_lsp(self, xhat: np.ndarray, spec: LspSpec) -> LspResult:
        """Style-protection loss and gradient at ``xhat`` (HxWxC array)."""

    @abc.abstractmethod
    def diffusion_roundtrip(
        self,
        x: np.ndarray,
        t: int = DEFAULT_ROUNDTRIP_T,
        total: int = DEFAULT_ROUNDTRIP_TOTAL,
        seed: int = 0,
    ) -> np.ndarray:
        """Image after t forward noise steps and t reverse denoise steps."""

    @abc.abstractmethod
    def spatial_distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Non-negative per-pixel perceptual distance map (HxW)."""

    @abc.abstractmethod
    def masked_lpips(
        self, x: np.ndarray, xhat: np.ndarray, mask: np.ndarray
    ) -> MaskedLoss:
        """Mask-weighted multi-layer feature distance and its gradient."""

    @abc.abstractmethod
    def clip_alignment(self, xhat: np.ndarray, prompt: str = ALIGNMENT_PROMPT) -> MaskedLoss:
        """Negative cosine between the image embedding and the prompt embedding."""

    def close(self) -> None:  # pragma: no cover - default no-op
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def require_finite(name: str, value: np.ndarray | float) -> None:
    if not np.all(np.isfinite(value)):
        raise InvalidOracleError(f"oracle returned non-finite {name}")


def check_roundtrip_steps(t: int, total: int) -> None:
    if not (0 < t <= total):
        raise InvalidInputError(f"need 0 < t <= total steps, got t={t}, total={total}")


@dataclass
class CallLog:
    """Small helper for tests: counts oracle calls by operation name."""

    counts: dict[str, int] = field(default_factory=dict)
    args: dict[str, list] = field(default_factory=dict)

    def record(self, op: str, **kwargs) -> None:
        self.counts[op] = self.counts.get(op, 0) + 1
        self.args.setdefault(op, []).append(kwargs)
