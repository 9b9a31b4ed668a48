"""Per-pixel human-sensitivity estimators and their post-processing.

Five classic estimators of how tolerant a region is to small intensity
changes, all computed on 8-bit scaled luminance:

* ``LA``      luminance adaptation: tolerance as a function of local
              background brightness (3x3 mean).
* ``CM``      contrast masking: tolerance from directional luminance
              contrast, mapped through a saturating curve.
* ``CSF``     contrast sensitivity: energy removed by a frequency-domain
              visual-sensitivity filter.
* ``STDEV``   local structure: 9x9 sliding standard deviation.
* ``ENTROPY`` local complexity: 9x9 sliding Shannon entropy of the
              rounded 8-bit histogram.

Each raw estimate is min-max normalized, inverted (1 = most perceptible),
and optionally quantized by quartiles into a four-level perturbation
strength multiplier.
"""

from __future__ import annotations

import enum
import importlib.resources
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import InvalidConfigError, InvalidInputError
from .image import LuminancePlane

#: Quantized strength multipliers, least to most sensitive quartile.
STRENGTH_LEVELS = (1.0, 0.85, 0.7225, 0.6141)

#: Default display geometry (pixels per degree of visual angle) for CSF.
DEFAULT_PPD = 32.0

_BLOCK = 9  # window side for the stdev / entropy estimators


class JndKind(enum.Enum):
    LA = "la"
    CM = "cm"
    CSF = "csf"
    STDEV = "stdev"
    ENTROPY = "entropy"


@dataclass(frozen=True)
class RawJndMap:
    """Unnormalized per-pixel tolerance estimate of one kind."""

    kind: JndKind
    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidInputError("raw map must be HxW")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("raw map contains non-finite values")
        if arr.min() < 0:
            raise InvalidInputError("raw map values must be non-negative")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class SensitivityMap:
    """Per-pixel sensitivity in [0, 1]; 1 marks the most perceptible pixels."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or not np.all(np.isfinite(arr)):
            raise InvalidInputError("sensitivity map must be finite and HxW")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidInputError("sensitivity values must lie in [0, 1]")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class StrengthMap:
    """Per-pixel strength multiplier drawn from :data:`STRENGTH_LEVELS`."""

    values: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidInputError("strength map must be HxW")
        if not np.isin(arr, STRENGTH_LEVELS).all():
            raise InvalidInputError(
                f"strength values must come from {STRENGTH_LEVELS}"
            )
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)


# ---------------------------------------------------------------------------
# scalar formula cores (shared by the vectorized estimators)
# ---------------------------------------------------------------------------

def la_curve(background: np.ndarray | float) -> np.ndarray | float:
    """Tolerance vs. background luminance B in [0, 255].

    17 * (1 - sqrt(B / 127)) + 3 for B <= 127, else (3 / 128) * (B - 127) + 3.
    """
    b = np.asarray(background, dtype=np.float64)
    dark = 17.0 * (1.0 - np.sqrt(b / 127.0)) + 3.0
    bright = (3.0 / 128.0) * (b - 127.0) + 3.0
    return np.where(b <= 127.0, dark, bright)


def cm_curve(contrast: np.ndarray | float) -> np.ndarray | float:
    """Saturating contrast-to-tolerance mapping.

    0.115 * 16 * LC^2.4 / (LC^2 + 26^2); monotone non-decreasing on LC >= 0.
    """
    lc = np.asarray(contrast, dtype=np.float64)
    return 0.115 * 16.0 * lc**2.4 / (lc**2 + 26.0**2)


def csf_gain(f: np.ndarray | float, theta: np.ndarray | float) -> np.ndarray | float:
    """Frequency-domain visual sensitivity H(f, theta).

    f is radial spatial frequency in cycles/degree, theta the orientation in
    [-pi, pi]. Below 7.8909 c/deg the gain is the constant 0.981; above it,
    2.6 * (0.0192 + 0.114 * f_t) * exp(-(0.114 * f_t)^1.1) with the oblique
    correction f_t = f / (0.15 * cos(4 theta) + 0.85).
    """
    f = np.asarray(f, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    f_t = f / (0.15 * np.cos(4.0 * theta) + 0.85)
    bf = 0.114 * f_t
    high = 2.6 * (0.0192 + bf) * np.exp(-(bf**1.1))
    return np.where(f >= 7.8909, high, 0.981)


def shannon_entropy_bits(values: np.ndarray) -> float:
    """Entropy (bits) of the 256-bin histogram of rounded 8-bit values."""
    q = np.clip(np.rint(np.asarray(values, dtype=np.float64)), 0, 255)
    _, counts = np.unique(q, return_counts=True)
    p = counts / q.size
    return float(-(p * np.log2(p)).sum())


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def estimate_la(lum: LuminancePlane) -> RawJndMap:
    """Luminance-adaptation tolerance over the 3x3 background mean."""
    background = ndimage.uniform_filter(lum.data, size=3, mode="nearest")
    return RawJndMap(JndKind.LA, la_curve(background))


def _load_kernels() -> dict[str, np.ndarray]:
    text = (
        importlib.resources.files("impasto.data")
        .joinpath("directional_kernels.txt")
        .read_text()
    )
    kernels: dict[str, np.ndarray] = {}
    name, rows = None, []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("kernel"):
            if name is not None:
                kernels[name] = np.array(rows, dtype=np.float64)
            name, rows = line.split()[1], []
        else:
            rows.append([int(tok) for tok in line.split()])
    if name is not None:
        kernels[name] = np.array(rows, dtype=np.float64)
    for key, k in kernels.items():
        if k.shape != (5, 5) or abs(k.sum()) > 0:
            raise InvalidConfigError(f"kernel {key} is not a 5x5 zero-sum grid")
    return kernels


_KERNELS: dict[str, np.ndarray] | None = None


def directional_kernels() -> dict[str, np.ndarray]:
    """The four 5x5 directional gradient kernels, loaded from the data file."""
    global _KERNELS
    if _KERNELS is None:
        _KERNELS = _load_kernels()
    return _KERNELS


def luminance_contrast(lum: LuminancePlane) -> np.ndarray:
    """Directional luminance contrast: (1/16) max_k |lum * grad_k|."""
    stack = [
        np.abs(ndimage.convolve(lum.data, k, mode="nearest"))
        for k in directional_kernels().values()
    ]
    return np.maximum.reduce(stack) / 16.0


def estimate_cm(lum: LuminancePlane) -> RawJndMap:
    """Contrast-masking tolerance from directional luminance contrast."""
    return RawJndMap(JndKind.CM, cm_curve(luminance_contrast(lum)))


def estimate_csf(lum: LuminancePlane, ppd: float = DEFAULT_PPD) -> RawJndMap:
    """Energy removed by the visual-sensitivity filter, per pixel.

    The luminance is first mapped to perceived lightness
    x = (0.02874 * lum)^(2.2/3) (sRGB display calibration, 8-bit input),
    filtered in the DFT domain by :func:`csf_gain`, and the absolute
    mean-free difference |x - x_filtered| is returned. High values mark
    content the eye resolves poorly.
    """
    if ppd <= 0:
        raise InvalidConfigError(f"pixels-per-degree must be positive, got {ppd}")
    h, w = lum.data.shape
    lightness = (0.02874 * lum.data) ** (2.2 / 3.0)
    # DFT index -> cycles/degree for the assumed display geometry
    fy = np.fft.fftfreq(h)[:, None] * ppd
    fx = np.fft.fftfreq(w)[None, :] * ppd
    gain = csf_gain(np.hypot(fy, fx), np.arctan2(fy, fx))
    filtered = np.fft.ifft2(gain * np.fft.fft2(lightness)).real
    diff = lightness - filtered
    # the DC bin is also scaled by the filter; comparing mean-free parts
    # keeps a constant plane at exactly zero
    return RawJndMap(JndKind.CSF, np.abs(diff - diff.mean()))


def estimate_blockstat(lum: LuminancePlane, kind: JndKind) -> RawJndMap:
    """Sliding 9x9 standard deviation or histogram entropy."""
    if kind == JndKind.STDEV:
        m1 = ndimage.uniform_filter(lum.data, size=_BLOCK, mode="nearest")
        m2 = ndimage.uniform_filter(lum.data**2, size=_BLOCK, mode="nearest")
        return RawJndMap(kind, np.sqrt(np.clip(m2 - m1**2, 0.0, None)))
    if kind == JndKind.ENTROPY:
        q = np.clip(np.rint(lum.data), 0, 255)
        n = _BLOCK * _BLOCK
        acc = np.zeros_like(q)
        for level in np.unique(q):
            frac = ndimage.uniform_filter(
                (q == level).astype(np.float64), size=_BLOCK, mode="nearest"
            )
            counts = np.rint(frac * n)
            p = counts / n
            nz = p > 0
            acc[nz] -= p[nz] * np.log2(p[nz])
        return RawJndMap(kind, np.clip(acc, 0.0, None))
    raise InvalidInputError(f"blockstat kind must be STDEV or ENTROPY, got {kind}")


def estimate_all(lum: LuminancePlane, ppd: float = DEFAULT_PPD) -> list[RawJndMap]:
    """All five raw estimates in the canonical order LA, CM, CSF, STDEV, ENTROPY."""
    return [
        estimate_la(lum),
        estimate_cm(lum),
        estimate_csf(lum, ppd),
        estimate_blockstat(lum, JndKind.STDEV),
        estimate_blockstat(lum, JndKind.ENTROPY),
    ]


# ---------------------------------------------------------------------------
# post-processing
# ---------------------------------------------------------------------------

def quantize_strength(sensitivity: SensitivityMap) -> StrengthMap:
    """Quartile-quantize a sensitivity map into the four strength levels.

    The least sensitive quartile receives multiplier 1.0 (full strength)
    down to 0.6141 for the most sensitive. Ties at quartile boundaries
    break toward the stronger level, deterministically by value then by
    raster order (stable sort).
    """
    values = sensitivity.values
    n = values.size
    order = np.argsort(values.ravel(), kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    quartile = np.minimum(4 * ranks // n, 3)
    levels = np.asarray(STRENGTH_LEVELS)[quartile]
    return StrengthMap(levels.reshape(values.shape))


def postprocess_map(raw: RawJndMap) -> tuple[SensitivityMap, StrengthMap]:
    """Min-max normalize, invert, and quartile-quantize a raw estimate.

    A constant raw map has no usable ordering; it degenerates to all-zero
    sensitivity and all-1.0 strength.
    """
    values = raw.values
    lo, hi = values.min(), values.max()
    if hi - lo <= 0:
        sens = SensitivityMap(np.zeros_like(values))
        return sens, StrengthMap(np.ones_like(values))
    sens = SensitivityMap(1.0 - (values - lo) / (hi - lo))
    return sens, quantize_strength(sens)
