"""Combining the per-estimator strength maps into one perceptual map.

The K strength maps are blended by a softmax-weighted convex combination
M(omega). omega starts uniform and is refined once per refinement event by
a gradient step on a consistency-plus-magnitude objective: keep the
protection loss at the refined map close to its value at the initial
averaged map, while shrinking the map-weighted perturbation energy. The
consistency term is amplified by 5e7 because its raw magnitude is far
below the energy term.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidInputError
from .image import ImageTensor
from .jnd import StrengthMap
from .oracle.base import GuidanceOracle, LspSpec

#: Amplification of the loss-consistency term of the refinement objective.
CONSISTENCY_GAIN = 5.0e7

#: Default omega gradient-descent step.
DEFAULT_OMEGA_STEP = 1e-2


def softmax(omega: np.ndarray) -> np.ndarray:
    z = np.exp(omega - omega.max())
    return z / z.sum()


@dataclass(frozen=True)
class FusionWeights:
    """Unbounded logits omega; the blend weights are softmax(omega)."""

    omega: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.omega, dtype=np.float64).copy()
        if arr.ndim != 1 or arr.size < 1 or not np.all(np.isfinite(arr)):
            raise InvalidInputError("omega must be a finite 1-D vector")
        arr.setflags(write=False)
        object.__setattr__(self, "omega", arr)

    @property
    def weights(self) -> np.ndarray:
        return softmax(self.omega)

    @classmethod
    def uniform(cls, k: int) -> "FusionWeights":
        # uniform logits (1/K each); softmax of any constant vector is uniform
        return cls(np.full(k, 1.0 / k))


def fuse_maps(
    maps: list[StrengthMap] | list[np.ndarray],
    weights: FusionWeights | None = None,
) -> np.ndarray:
    """Convex combination of K maps; ``weights=None`` means 1/K each."""
    arrays = [m.values if isinstance(m, StrengthMap) else np.asarray(m) for m in maps]
    if len(arrays) < 1:
        raise InvalidInputError("need at least one map to fuse")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise InvalidInputError("all maps must share the same spatial extent")
    if weights is None:
        w = np.full(len(arrays), 1.0 / len(arrays))
    else:
        if weights.omega.size != len(arrays):
            raise InvalidInputError(
                f"got {weights.omega.size} weights for {len(arrays)} maps"
            )
        w = weights.weights
    out = np.zeros(shape)
    for wk, a in zip(w, arrays):
        out += wk * a
    return out


@dataclass(frozen=True)
class FusionState:
    """State of one refinement run.

    ``initial_map`` is the plain average of the strength maps and stays
    fixed; ``current_map`` is the softmax blend at the current omega.
    """

    maps: tuple[np.ndarray, ...]
    initial_map: np.ndarray
    omega: FusionWeights
    step_size: float = DEFAULT_OMEGA_STEP

    @property
    def current_map(self) -> np.ndarray:
        return fuse_maps(list(self.maps), self.omega)

    @classmethod
    def from_maps(
        cls, maps: list[StrengthMap], step_size: float = DEFAULT_OMEGA_STEP
    ) -> "FusionState":
        arrays = tuple(m.values for m in maps)
        return cls(
            maps=arrays,
            initial_map=fuse_maps(list(arrays)),
            omega=FusionWeights.uniform(len(arrays)),
            step_size=step_size,
        )


def _pixel_energy(map2d: np.ndarray, delta: np.ndarray) -> float:
    """L2 norm of the map-modulated perturbation (map broadcast over channels)."""
    return float(np.sqrt(((map2d[:, :, None] * delta) ** 2).sum()))


def refinement_loss(
    state: FusionState,
    omega: np.ndarray,
    x: ImageTensor,
    delta: np.ndarray,
    oracle: GuidanceOracle,
    lsp: LspSpec,
) -> float:
    """Objective value at the given omega (used by tests and line searches)."""
    blended = fuse_maps(list(state.maps), FusionWeights(omega))
    loss_init = oracle.eval_lsp(
        np.asarray(x.data) + state.initial_map[:, :, None] * delta, lsp
    ).loss
    loss_cur = oracle.eval_lsp(
        np.asarray(x.data) + blended[:, :, None] * delta, lsp
    ).loss
    return CONSISTENCY_GAIN * (loss_init - loss_cur) ** 2 + _pixel_energy(
        blended, delta
    )


def refinement_gradient(
    state: FusionState,
    omega: np.ndarray,
    x: ImageTensor,
    delta: np.ndarray,
    oracle: GuidanceOracle,
    lsp: LspSpec,
) -> np.ndarray:
    """Analytic gradient of :func:`refinement_loss` with respect to omega."""
    w = softmax(omega)
    blended = fuse_maps(list(state.maps), FusionWeights(omega))
    x_arr = np.asarray(x.data)

    loss_init = oracle.eval_lsp(x_arr + state.initial_map[:, :, None] * delta, lsp).loss
    cur = oracle.eval_lsp(x_arr + blended[:, :, None] * delta, lsp)

    # d loss_cur / d w_k = <grad_xhat, M_k . delta>
    per_map = np.array(
        [(cur.grad * (mk[:, :, None] * delta)).sum() for mk in state.maps]
    )
    grad_w = -2.0 * CONSISTENCY_GAIN * (loss_init - cur.loss) * per_map

    energy = _pixel_energy(blended, delta)
    if energy > 0:
        modulated_sq = blended[:, :, None] * delta**2
        grad_w = grad_w + np.array(
            [(modulated_sq * mk[:, :, None]).sum() for mk in state.maps]
        ) / energy
    # else: perturbation is fully masked out; the energy term has no slope

    # chain through the softmax Jacobian: J^T v = w . (v - <w, v>)
    return w * (grad_w - float(w @ grad_w))


def iwr_update(
    state: FusionState,
    x: ImageTensor,
    delta: np.ndarray,
    y: ImageTensor | None,
    oracle: GuidanceOracle,
    lsp: LspSpec | None = None,
) -> FusionState:
    """One omega descent step on the refinement objective.

    ``y`` is the protection target; when ``lsp`` is not supplied, a pure
    encoder-style spec against ``y`` is assumed.
    """
    if lsp is None:
        if y is None:
            raise InvalidInputError("either y or an lsp spec is required")
        lsp = LspSpec(lambda_e=1.0, lambda_sd=0.0, target=y)
    grad = refinement_gradient(state, state.omega.omega, x, delta, oracle, lsp)
    new_omega = FusionWeights(state.omega.omega - state.step_size * grad)
    return replace(state, omega=new_omega)
