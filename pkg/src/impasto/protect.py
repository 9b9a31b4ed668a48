"""Protection orchestrator: modulated PGD with periodic map refinement.

The loop follows signed gradient ascent on the style-protection term
while descending the penalty and constraint bank (the combined objective
is assembled by :mod:`impasto.constraints`; this module owns the single
global optimization sign). Each step's update is scaled per pixel by the
fused perceptual strength map and the difficulty map, then projected onto
the L-infinity budget box intersected with the valid pixel range. Every
``interval`` steps the fusion weights take one refinement step and the
difficulty map is re-estimated from a partial diffusion roundtrip.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import jnd
from .constraints import ConstraintWeights, TotalLoss, total_loss, wavelet
from .errors import (
    ImpastoError,
    InvalidConfigError,
    InvalidInputError,
    ProtectionAborted,
    UnsupportedOperationError,
)
from .fusion import DEFAULT_OMEGA_STEP, FusionState, iwr_update
from .image import ImageTensor, to_luminance
from .oracle.base import Capability, GuidanceOracle, LspSpec

log = logging.getLogger(__name__)

#: preset name -> (lambda_e, lambda_sd)
PRESETS = {
    "photoguard": (1.0, 0.0),
    "advdm": (0.0, 1.0),
    "mist": (1.0, 1.0),
    "anti-db": (1.0, 1.0),
    "diff-protect": (1.0, 1.0),
}

GRID_CELL = 16
GRID_CONTRAST = 0.35


@dataclass(frozen=True)
class ProtectionConfig:
    """Settings of one protection run.

    ``eta`` and ``alpha`` are in pixel units of [0, 1]. ``steps=0`` and
    ``alpha=0`` are accepted as documented no-op degenerates (the run
    returns the input unchanged).
    """

    eta: float = 8.0 / 255.0
    alpha: float = 2.0 / 255.0
    steps: int = 100
    interval: int = 4
    preset: str = "photoguard"
    lambda_e: float | None = None
    lambda_sd: float | None = None
    weights: ConstraintWeights = field(default_factory=ConstraintWeights)
    penalty_weight: float = 1.0
    penalty_soft: bool = True
    m_lo: float = 0.5
    ppd: float = 32.0
    roundtrip_t: int = 5
    roundtrip_total: int = 25
    omega_step: float = DEFAULT_OMEGA_STEP
    wavelet_name: str = "haar"
    seed: int = 0
    enable_pap: bool = True
    enable_iwr: bool = True
    enable_dap: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise InvalidConfigError("eta must be positive")
        if self.alpha < 0:
            raise InvalidConfigError("alpha must be non-negative")
        if self.steps < 0:
            raise InvalidConfigError("steps must be non-negative")
        if self.interval < 1:
            raise InvalidConfigError("interval must be at least 1")
        if not 0.0 <= self.m_lo <= 1.0:
            raise InvalidConfigError("m_lo must lie in [0, 1]")
        if self.ppd <= 0:
            raise InvalidConfigError("ppd must be positive")
        if not 0 < self.roundtrip_t <= self.roundtrip_total:
            raise InvalidConfigError("need 0 < roundtrip_t <= roundtrip_total")
        if self.preset not in PRESETS:
            raise InvalidConfigError(
                f"unknown preset {self.preset!r}; available: {sorted(PRESETS)}"
            )
        wavelet(self.wavelet_name)  # validates the name

    @property
    def effective_lambda_e(self) -> float:
        return PRESETS[self.preset][0] if self.lambda_e is None else self.lambda_e

    @property
    def effective_lambda_sd(self) -> float:
        return PRESETS[self.preset][1] if self.lambda_sd is None else self.lambda_sd

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ProtectionConfig":
        data = dict(data)
        if isinstance(data.get("weights"), dict):
            data["weights"] = ConstraintWeights(**data["weights"])
        return cls(**data)


@dataclass(frozen=True)
class DifficultyMap:
    """Per-pixel protection difficulty in [m_lo, 1]; all-ones until the
    first difficulty estimate happens."""

    values: np.ndarray
    m_lo: float

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise InvalidInputError("difficulty map must be finite and HxW")
        lo = min(self.m_lo, 1.0)
        if arr.min() < lo - 1e-12 or arr.max() > 1.0 + 1e-12:
            raise InvalidInputError("difficulty values must lie in [m_lo, 1]")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def ones(cls, shape: tuple[int, int], m_lo: float) -> "DifficultyMap":
        return cls(np.ones(shape), m_lo)


@dataclass(frozen=True)
class StepRecord:
    """One line of the loss trace; ``step`` is the state index: entry i
    describes the image after i updates (entry 0 is the unperturbed input)."""

    step: int
    total: float
    lsp: float
    loss_e: float | None
    loss_sd: float | None
    penalty: float
    lowpass: float
    lpips: float
    clip: float
    linf: float
    pixel_min: float
    pixel_max: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ProtectionResult:
    protected: ImageTensor
    delta: np.ndarray
    fused_map: np.ndarray
    difficulty_map: np.ndarray
    sensitivity_map: np.ndarray
    omega: np.ndarray
    omega_history: list[np.ndarray]
    trace: list[StepRecord]
    wall_time: float


def derive_seed(run_seed: int, tag: str, index: int) -> int:
    """Stable per-event sub-seed (reproducible across platforms)."""
    digest = hashlib.blake2s(
        f"{run_seed}:{tag}:{index}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little") & 0x7FFFFFFF


def default_grid_target(shape: tuple[int, int, int]) -> ImageTensor:
    """Mid-gray target overlaid with a high-contrast 16-pixel checkerboard."""
    h, w, c = shape
    rows = (np.arange(h) // GRID_CELL)[:, None]
    cols = (np.arange(w) // GRID_CELL)[None, :]
    checker = ((rows + cols) % 2).astype(np.float64)
    plane = 0.5 + GRID_CONTRAST * (2.0 * checker - 1.0)
    return ImageTensor(np.repeat(plane[:, :, None], c, axis=2))


def project_linf(x: np.ndarray, candidate: np.ndarray, eta: float) -> np.ndarray:
    """Clamp ``candidate`` into the eta-box around ``x``, then into [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    candidate = np.asarray(candidate, dtype=np.float64)
    if x.shape != candidate.shape:
        raise InvalidInputError("images must share the same extent")
    return np.clip(np.clip(candidate, x - eta, x + eta), 0.0, 1.0)


def _evaluate(
    x_arr: np.ndarray,
    cur: np.ndarray,
    target: ImageTensor,
    sens: np.ndarray,
    config: ProtectionConfig,
    oracle: GuidanceOracle,
    step_seed: int,
) -> TotalLoss:
    spec = LspSpec(
        lambda_e=config.effective_lambda_e,
        lambda_sd=config.effective_lambda_sd,
        target=target if config.effective_lambda_e > 0 else None,
        seed=step_seed,
    )
    return total_loss(
        x_arr,
        cur,
        target,
        sens,
        config.weights,
        config.effective_lambda_e,
        config.effective_lambda_sd,
        oracle,
        lsp=spec,
        penalty_weight=config.penalty_weight if config.enable_pap else 0.0,
        penalty_soft=config.penalty_soft,
        filt=wavelet(config.wavelet_name),
    )


def _ascent_direction(ev: TotalLoss) -> np.ndarray:
    # ascend the protection term, descend penalty + bank: the descent
    # gradient of (-lsp + rest) is (ev.grad - 2 * ev.lsp_grad), negated
    return np.sign(2.0 * ev.lsp_grad - ev.grad)


def pgd_step(
    x_prev: np.ndarray,
    x: np.ndarray,
    target: ImageTensor,
    sens: np.ndarray,
    fused_map: np.ndarray,
    difficulty: np.ndarray,
    config: ProtectionConfig,
    oracle: GuidanceOracle,
    step_seed: int = 0,
) -> tuple[np.ndarray, TotalLoss]:
    """One modulated, projected signed-gradient update from ``x_prev``."""
    ev = _evaluate(np.asarray(x), x_prev, target, sens, config, oracle, step_seed)
    step = config.alpha * _ascent_direction(ev)
    if config.enable_pap:
        step = step * fused_map[:, :, None]
    step = step * difficulty[:, :, None]
    return project_linf(x, x_prev + step, config.eta), ev


def dap_difficulty(
    x: np.ndarray,
    x_cur: np.ndarray,
    config: ProtectionConfig,
    oracle: GuidanceOracle,
    seed: int = 0,
) -> DifficultyMap:
    """Difficulty from the perceptual distance of partial diffusion roundtrips.

    The distance map is min-max normalized into [m_lo, 1]; a constant map
    (including the x_cur == x case) carries no signal and degenerates to
    all-ones. A missing oracle capability disables the estimate with a
    warning instead of failing the run.
    """
    caps = oracle.capabilities()
    needed = {Capability.DIFFUSION_ROUNDTRIP, Capability.SPATIAL_DISTANCE}
    if not needed.issubset(caps):
        log.warning("oracle lacks %s; difficulty estimation disabled", needed - caps)
        return DifficultyMap.ones(np.asarray(x).shape[:2], config.m_lo)
    rt_x = oracle.diffusion_roundtrip(
        x, config.roundtrip_t, config.roundtrip_total, seed=seed
    )
    rt_cur = oracle.diffusion_roundtrip(
        x_cur, config.roundtrip_t, config.roundtrip_total, seed=seed
    )
    dist = oracle.spatial_distance(rt_x, rt_cur)
    lo, hi = dist.min(), dist.max()
    if hi - lo <= 0:
        return DifficultyMap.ones(dist.shape, config.m_lo)
    normalized = (dist - lo) / (hi - lo)
    return DifficultyMap(config.m_lo + (1.0 - config.m_lo) * normalized, config.m_lo)


def build_maps(x: ImageTensor, ppd: float):
    """JND pipeline: per-estimator sensitivity and strength maps plus the
    averaged sensitivity used by penalty and constraint masks."""
    lum = to_luminance(x)
    raws = jnd.estimate_all(lum, ppd)
    processed = [jnd.postprocess_map(r) for r in raws]
    sens_maps = [s.values for s, _ in processed]
    strength_maps = [m for _, m in processed]
    return np.mean(sens_maps, axis=0), strength_maps


def _record(step: int, ev: TotalLoss, delta: np.ndarray, cur: np.ndarray) -> StepRecord:
    return StepRecord(
        step=step,
        total=ev.loss,
        lsp=ev.lsp,
        loss_e=ev.loss_e,
        loss_sd=ev.loss_sd,
        penalty=ev.penalty,
        lowpass=ev.lowpass,
        lpips=ev.lpips,
        clip=ev.clip,
        linf=float(np.abs(delta).max()) if delta.size else 0.0,
        pixel_min=float(cur.min()),
        pixel_max=float(cur.max()),
    )


def protect_run(
    x: ImageTensor,
    y: ImageTensor | None,
    config: ProtectionConfig,
    oracle: GuidanceOracle,
) -> ProtectionResult:
    """Run the full protection loop and return the protected image.

    ``y`` defaults to the grid target. The result's perturbation is the
    accumulated, projected difference ``protected - x``; the per-step map
    modulation is already inside it.
    """
    start = time.perf_counter()
    x_arr = np.asarray(x.data)
    if y is None:
        y = default_grid_target(x.shape)
    if y.shape != x.shape:
        raise InvalidInputError("target extent differs from the input image")
    if config.effective_lambda_e == 0 and config.effective_lambda_sd == 0:
        raise InvalidConfigError("preset weights disable the protection loss")
    if Capability.LSP_GRAD not in oracle.capabilities():
        raise UnsupportedOperationError("oracle cannot evaluate protection gradients")

    sens, strength_maps = build_maps(x, config.ppd)
    fusion_state = FusionState.from_maps(strength_maps, step_size=config.omega_step)
    fused = fusion_state.current_map if config.enable_pap else np.ones(x.shape[:2])
    difficulty = DifficultyMap.ones(x.shape[:2], config.m_lo)
    omega_history = [fusion_state.omega.omega.copy()]

    cur = x_arr.copy()
    trace: list[StepRecord] = []
    try:
        for i in range(1, config.steps + 1):
            step_seed = derive_seed(config.seed, "lsp", i)
            cur_next, ev = pgd_step(
                cur, x_arr, y, sens, fused, difficulty.values, config, oracle, step_seed
            )
            trace.append(_record(i - 1, ev, cur - x_arr, cur))
            cur = cur_next

            if i % config.interval == 0:
                delta = cur - x_arr
                if config.enable_iwr and config.enable_pap:
                    spec = LspSpec(
                        lambda_e=config.effective_lambda_e,
                        lambda_sd=config.effective_lambda_sd,
                        target=y if config.effective_lambda_e > 0 else None,
                        seed=step_seed,
                    )
                    fusion_state = iwr_update(fusion_state, x, delta, y, oracle, spec)
                    fused = fusion_state.current_map
                    omega_history.append(fusion_state.omega.omega.copy())
                if config.enable_dap:
                    difficulty = dap_difficulty(
                        x_arr, cur, config, oracle,
                        seed=derive_seed(config.seed, "dap", i),
                    )

        final_seed = derive_seed(config.seed, "lsp", config.steps + 1)
        final_ev = _evaluate(x_arr, cur, y, sens, config, oracle, final_seed)
    except ImpastoError as exc:
        raise ProtectionAborted(
            f"run aborted after {len(trace)} completed steps: {exc}",
            trace=trace,
            step=len(trace),
        ) from exc
    trace.append(_record(config.steps, final_ev, cur - x_arr, cur))

    return ProtectionResult(
        protected=ImageTensor(cur),
        delta=cur - x_arr,
        fused_map=fused,
        difficulty_map=difficulty.values,
        sensitivity_map=sens,
        omega=fusion_state.omega.omega.copy(),
        omega_history=omega_history,
        trace=trace,
        wall_time=time.perf_counter() - start,
    )
