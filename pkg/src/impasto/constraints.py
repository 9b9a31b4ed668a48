"""Imperceptibility constraint bank and the combined protection objective.

Three constraints keep the perturbation visually quiet, each weighted by
a sensitivity mask so quiet regions are guarded harder:

* masked low-pass: squared difference of single-level wavelet LL-band
  reconstructions (what the image looks like from a distance),
* masked feature distance: LPIPS-form multi-layer squared feature
  difference under a pluggable extractor,
* prompt alignment: negative cosine between the image embedding and a
  fixed "Noise-free image" prompt embedding, computed by the oracle.

On top sits a soft L-infinity penalty on the sensitivity-weighted
perturbation and the style-protection loss itself. ``total_loss`` returns
the combined value exactly as summed; the orchestrator decides the
optimization direction (it ascends the protection term and descends
everything else).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import cv2
import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .oracle.base import GuidanceOracle, LspSpec

#: Smoothed-max temperature for the perturbation penalty.
PENALTY_TEMPERATURE = 0.01

_SQRT2 = np.sqrt(2.0)


# ---------------------------------------------------------------------------
# wavelet low-pass
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WaveletFilterPair:
    """Analysis taps of an orthogonal wavelet (lowpass, highpass)."""

    name: str
    lowpass: tuple[float, ...]
    highpass: tuple[float, ...]


def _qmf(lowpass: tuple[float, ...]) -> tuple[float, ...]:
    n = len(lowpass)
    return tuple((-1.0) ** k * lowpass[n - 1 - k] for k in range(n))


_HAAR_LO = (1.0 / _SQRT2, 1.0 / _SQRT2)
_DB2_LO = (
    0.48296291314469025,
    0.8365163037378079,
    0.22414386804185735,
    -0.12940952255092145,
)

_WAVELETS = {
    "haar": WaveletFilterPair("haar", _HAAR_LO, _qmf(_HAAR_LO)),
    "db2": WaveletFilterPair("db2", _DB2_LO, _qmf(_DB2_LO)),
}


def wavelet(name: str = "haar") -> WaveletFilterPair:
    try:
        return _WAVELETS[name]
    except KeyError:
        raise InvalidConfigError(
            f"unknown wavelet {name!r}; available: {sorted(_WAVELETS)}"
        ) from None


def _band_matrix(taps: tuple[float, ...], n: int) -> np.ndarray:
    """N/2 x N periodized analysis matrix for one filter."""
    if n % 2:
        raise InvalidInputError("analysis length must be even")
    m = np.zeros((n // 2, n))
    for k in range(n // 2):
        for j, tap in enumerate(taps):
            m[k, (2 * k + j) % n] += tap
    return m


_MATRIX_CACHE: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}


def _matrices(filt: WaveletFilterPair, n: int) -> tuple[np.ndarray, np.ndarray]:
    key = (filt.name, n)
    if key not in _MATRIX_CACHE:
        _MATRIX_CACHE[key] = (
            _band_matrix(filt.lowpass, n),
            _band_matrix(filt.highpass, n),
        )
    return _MATRIX_CACHE[key]


def dwt_bands(plane: np.ndarray, filt: WaveletFilterPair):
    """Single-level 2-D analysis into (ll, lh, hl, hh) bands."""
    lo_r, hi_r = _matrices(filt, plane.shape[0])
    lo_c, hi_c = _matrices(filt, plane.shape[1])
    return (
        lo_r @ plane @ lo_c.T,
        hi_r @ plane @ lo_c.T,
        lo_r @ plane @ hi_c.T,
        hi_r @ plane @ hi_c.T,
    )


def idwt_bands(bands, shape: tuple[int, int], filt: WaveletFilterPair) -> np.ndarray:
    """Inverse of :func:`dwt_bands` (exact for orthogonal filters)."""
    ll, lh, hl, hh = bands
    lo_r, hi_r = _matrices(filt, shape[0])
    lo_c, hi_c = _matrices(filt, shape[1])
    return (
        lo_r.T @ ll @ lo_c
        + hi_r.T @ lh @ lo_c
        + lo_r.T @ hl @ hi_c
        + hi_r.T @ hh @ hi_c
    )


def _lowpass_plane(plane: np.ndarray, filt: WaveletFilterPair) -> np.ndarray:
    if filt.name == "haar":
        # 2x2 block mean, algebraically identical to the matrix path but
        # exact on constants (avoids the irrational 1/sqrt(2) roundoff)
        h, w = plane.shape
        blocks = plane.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))
        return np.repeat(np.repeat(blocks, 2, axis=0), 2, axis=1)
    lo_r, _ = _matrices(filt, plane.shape[0])
    lo_c, _ = _matrices(filt, plane.shape[1])
    return lo_r.T @ (lo_r @ plane @ lo_c.T) @ lo_c


def dwt_lowpass(img: np.ndarray, filt: WaveletFilterPair | None = None) -> np.ndarray:
    """LL-band reconstruction at full resolution, per channel.

    Odd extents are edge-padded to even before analysis and cropped after.
    """
    filt = filt or wavelet("haar")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="edge")
    out = np.empty_like(arr)
    for ch in range(c):
        out[:, :, ch] = _lowpass_plane(arr[:, :, ch], filt)
    out = out[:h, :w]
    return out[:, :, 0] if squeeze else out


def dwt_lowpass_adjoint(img: np.ndarray, filt: WaveletFilterPair | None = None) -> np.ndarray:
    """Transpose of :func:`dwt_lowpass` as a linear operator.

    The projection itself is symmetric; what needs transposing is the
    odd-extent handling: the crop becomes zero padding and the edge
    replication folds the padded row/column back onto the edge. On even
    extents this is exactly :func:`dwt_lowpass`.
    """
    filt = filt or wavelet("haar")
    arr = np.asarray(img, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    ph, pw = h % 2, w % 2
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)))  # zero fill
    out = np.empty_like(arr)
    for ch in range(c):
        out[:, :, ch] = _lowpass_plane(arr[:, :, ch], filt)
    if ph:
        out[h - 1] += out[h]
    if pw:
        out[:, w - 1] += out[:, w]
    out = out[:h, :w]
    return out[:, :, 0] if squeeze else out


# ---------------------------------------------------------------------------
# masked constraint terms
# ---------------------------------------------------------------------------

def _as_mask(mask, shape) -> np.ndarray:
    arr = mask.values if hasattr(mask, "values") else np.asarray(mask, dtype=np.float64)
    if arr.shape != shape[:2]:
        raise InvalidInputError("mask extent differs from the images")
    return arr


def masked_lowpass_loss(
    x: np.ndarray,
    xhat: np.ndarray,
    mask: np.ndarray,
    filt: WaveletFilterPair | None = None,
) -> tuple[float, np.ndarray]:
    """Sensitivity-weighted mean squared LL-band difference and gradient.

    (1/d) sum_i mask_i * ||LP(x)_i - LP(xhat)_i||^2 with d the pixel count;
    the gradient pulls the masked residual back through the operator's
    adjoint.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise InvalidInputError("images must share the same extent")
    m = _as_mask(mask, x.shape)
    d = x.shape[0] * x.shape[1]
    diff = dwt_lowpass(xhat, filt) - dwt_lowpass(x, filt)
    loss = float((m[:, :, None] * diff**2).sum() / d)
    grad = dwt_lowpass_adjoint(m[:, :, None] * diff, filt) * (2.0 / d)
    return loss, grad


class FeatureExtractor(Protocol):
    """Multi-layer spatial feature stack with channel weights and a VJP."""

    def features(self, img: np.ndarray) -> list[np.ndarray]: ...

    def channel_weights(self) -> list[np.ndarray]: ...

    def feature_vjp(
        self, img: np.ndarray, cotangents: list[np.ndarray]
    ) -> np.ndarray: ...


def _downsample_mask(mask: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if mask.shape == shape:
        return mask
    # area averaging; cv2 wants (width, height)
    return cv2.resize(mask, (shape[1], shape[0]), interpolation=cv2.INTER_AREA)


def masked_lpips_loss(
    x: np.ndarray,
    xhat: np.ndarray,
    mask: np.ndarray,
    feat: FeatureExtractor,
) -> tuple[float, np.ndarray]:
    """LPIPS-form masked feature distance and its gradient w.r.t. ``xhat``.

    sum_l (1/d_l) sum_i mask_i * ||w_l * (phi_l(x)_i - phi_l(xhat)_i)||^2,
    where the mask is area-averaged down to each layer's resolution.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape:
        raise InvalidInputError("images must share the same extent")
    m = _as_mask(mask, x.shape)

    ref = feat.features(x)
    cur = feat.features(xhat)
    weights = feat.channel_weights()
    loss = 0.0
    cotangents = []
    for fr, fc, w in zip(ref, cur, weights):
        d_l = fr.shape[0] * fr.shape[1]
        m_l = _downsample_mask(m, fr.shape[:2])
        diff = w[None, None, :] * (fc - fr)
        loss += float((m_l[:, :, None] * diff**2).sum() / d_l)
        cotangents.append(m_l[:, :, None] * diff * w[None, None, :] * (2.0 / d_l))
    grad = feat.feature_vjp(xhat, cotangents)
    return loss, grad


def clip_alignment_loss(
    xhat: np.ndarray, oracle: GuidanceOracle
) -> tuple[float, np.ndarray]:
    """Prompt-alignment loss via the oracle; lies in [-1, 1]."""
    res = oracle.clip_alignment(np.asarray(xhat, dtype=np.float64))
    if not np.isfinite(res.loss) or not np.all(np.isfinite(res.grad)):
        raise InvalidInputError("oracle returned a non-finite alignment result")
    return float(res.loss), res.grad


def perturbation_penalty(
    delta: np.ndarray,
    mask: np.ndarray,
    soft: bool = True,
    temperature: float = PENALTY_TEMPERATURE,
) -> tuple[float, np.ndarray]:
    """max_i |mask_i * delta_i| and a usable (sub)gradient.

    The default is the mean-normalized log-sum-exp smoothing
    T * log(mean_i exp(v_i / T)), which is exactly zero at delta = 0 and
    underestimates the true maximum by at most T * log(d); its gradient
    spreads over near-maximal pixels. ``soft=False`` returns the exact
    maximum with the subgradient concentrated at the argmax element.
    """
    delta = np.asarray(delta, dtype=np.float64)
    m = _as_mask(mask, delta.shape)[:, :, None]
    v = np.abs(m * delta)
    if not soft:
        idx = np.unravel_index(np.argmax(v), v.shape)
        grad = np.zeros_like(delta)
        grad[idx] = m[idx[0], idx[1], 0] * np.sign(delta[idx])
        return float(v[idx]), grad
    top = v.max()
    z = np.exp((v - top) / temperature)
    zsum = z.sum()
    loss = float(top + temperature * np.log(zsum / v.size))
    grad = (z / zsum) * m * np.sign(delta)
    return loss, grad


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintWeights:
    """Bank weights; ``unet_scale`` shrinks them whenever the denoiser term
    participates in the protection loss (its magnitudes are far smaller)."""

    lambda_l: float = 5.0
    lambda_lp: float = 10.0
    lambda_c: float = 0.1
    unet_scale: float = 0.05

    def __post_init__(self):
        if min(self.lambda_l, self.lambda_lp, self.lambda_c, self.unet_scale) < 0:
            raise InvalidConfigError("constraint weights must be non-negative")

    def effective(self, lambda_sd: float) -> tuple[float, float, float]:
        s = self.unet_scale if lambda_sd > 0 else 1.0
        return self.lambda_l * s, self.lambda_lp * s, self.lambda_c * s


@dataclass(frozen=True)
class TotalLoss:
    """Combined objective value, gradient, and per-term breakdown."""

    loss: float
    grad: np.ndarray
    lsp: float
    lsp_grad: np.ndarray
    loss_e: float | None
    loss_sd: float | None
    penalty: float
    lowpass: float
    lpips: float
    clip: float


def total_loss(
    x: np.ndarray,
    xhat: np.ndarray,
    y,
    mask: np.ndarray,
    weights: ConstraintWeights,
    lambda_e: float,
    lambda_sd: float,
    oracle: GuidanceOracle,
    *,
    lsp: LspSpec | None = None,
    penalty_weight: float = 1.0,
    penalty_soft: bool = True,
    filt: WaveletFilterPair | None = None,
) -> TotalLoss:
    """Protection loss plus penalty plus the constraint bank, as summed.

    Terms with a zero weight are skipped entirely, not multiplied by zero,
    so a bank-free configuration touches nothing but the protection loss.
    """
    x = np.asarray(x, dtype=np.float64)
    xhat = np.asarray(xhat, dtype=np.float64)
    if lsp is None:
        lsp = LspSpec(lambda_e=lambda_e, lambda_sd=lambda_sd, target=y)
    res = oracle.eval_lsp(xhat, lsp)
    loss = res.loss
    grad = res.grad.copy()

    pen = 0.0
    if penalty_weight > 0:
        pen, pen_grad = perturbation_penalty(xhat - x, mask, soft=penalty_soft)
        loss += penalty_weight * pen
        grad += penalty_weight * pen_grad

    w_l, w_lp, w_c = weights.effective(lambda_sd)
    lp_val = lpips_val = clip_val = 0.0
    if w_lp > 0:
        lp_val, lp_grad = masked_lowpass_loss(x, xhat, mask, filt)
        loss += w_lp * lp_val
        grad += w_lp * lp_grad
    if w_l > 0:
        fv = oracle.masked_lpips(x, xhat, _as_mask(mask, x.shape))
        lpips_val = float(fv.loss)
        loss += w_l * lpips_val
        grad += w_l * fv.grad
    if w_c > 0:
        clip_val, clip_grad = clip_alignment_loss(xhat, oracle)
        loss += w_c * clip_val
        grad += w_c * clip_grad

    return TotalLoss(
        loss=float(loss),
        grad=grad,
        lsp=float(res.loss),
        lsp_grad=res.grad,
        loss_e=res.loss_e,
        loss_sd=res.loss_sd,
        penalty=float(pen),
        lowpass=float(lp_val),
        lpips=float(lpips_val),
        clip=float(clip_val),
    )
