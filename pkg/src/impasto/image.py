"""Image container, luminance conversion, and lossless PNG I/O.

All processing in this package runs on ``ImageTensor``: a channel-last
float64 array with values in [0, 1]. JND estimators operate on an 8-bit
scaled ``LuminancePlane`` (values in [0, 255]) because their published
constants assume 8-bit luminance.
"""

from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from .errors import InvalidInputError

MIN_SIDE = 16

# ITU-601 luma weights; the scale to [0, 255] matches the JND constants
# (127 pivot, 3/128 slope, 0.02874 display calibration).
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ImageTensor:
    """H x W x C image, row-major, channel-last, values in [0, 1].

    Channels are 1 (grayscale) or 3 (RGB). Instances are immutable; the
    backing array is marked read-only so they can be shared across threads.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise InvalidInputError(
                f"expected HxWx{{1,3}} array, got shape {np.shape(self.data)}"
            )
        if arr.shape[0] < MIN_SIDE or arr.shape[1] < MIN_SIDE:
            raise InvalidInputError(
                f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got "
                f"{arr.shape[0]}x{arr.shape[1]}"
            )
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InvalidInputError(
                f"pixel values must lie in [0, 1], got "
                f"[{arr.min():.6g}, {arr.max():.6g}]"
            )
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class LuminancePlane:
    """H x W luminance plane scaled to [0, 255]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 2:
            raise InvalidInputError(f"expected HxW array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError("luminance contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 255.0:
            raise InvalidInputError("luminance values must lie in [0, 255]")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


def to_luminance(img: ImageTensor) -> LuminancePlane:
    """Convert an image to 8-bit scaled luminance.

    3-channel input uses the fixed 0.299/0.587/0.114 R/G/B weights;
    1-channel input is scaled by 255 directly.
    """
    if img.channels == 3:
        lum = img.data @ _LUMA_WEIGHTS
    else:
        lum = img.data[:, :, 0]
    # weights sum to 1, so the product stays within [0, 255]
    return LuminancePlane(lum * 255.0)


def _to_cv(arr: np.ndarray) -> np.ndarray:
    # cv2 stores color as BGR
    if arr.ndim == 3 and arr.shape[2] == 3:
        return arr[:, :, ::-1]
    return arr


_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _check_png_signature(path: str) -> None:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(8)
    except OSError as exc:
        raise InvalidInputError(f"cannot read image: {path}: {exc}") from exc
    if magic != _PNG_MAGIC:
        raise InvalidInputError(f"{path}: not a PNG file (only PNG is supported)")


def _check_png_suffix(path: str) -> None:
    if not str(path).lower().endswith(".png"):
        raise InvalidInputError(f"{path}: output must use a .png suffix")


def read_png(path: str) -> ImageTensor:
    """Read an 8- or 16-bit PNG (grayscale or RGB) into [0, 1] floats."""
    _check_png_signature(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InvalidInputError(f"cannot read image: {path}")
    if raw.ndim == 3 and raw.shape[2] == 4:
        raise InvalidInputError(
            f"{path}: alpha channels are not supported, flatten the image first"
        )
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise InvalidInputError(f"{path}: unsupported PNG sample type {raw.dtype}")
    arr = raw.astype(np.float64) / scale
    if arr.ndim == 3:
        arr = _to_cv(arr)  # BGR -> RGB (same swap both ways)
    return ImageTensor(arr)


def write_png(path: str, img: ImageTensor, bit_depth: int = 16) -> None:
    """Write an image as PNG.

    16-bit (default) keeps perturbations below the 8-bit quantization step;
    8-bit quantizes each sample to the nearest of 256 levels and loses any
    detail finer than 1/255.
    """
    _check_png_suffix(path)
    arr = _quantize(img.data, bit_depth)
    ok = cv2.imwrite(str(path), _to_cv(arr))
    if not ok:
        raise InvalidInputError(f"cannot write image: {path}")


def _quantize(data: np.ndarray, bit_depth: int) -> np.ndarray:
    if bit_depth == 8:
        return np.rint(data * 255.0).astype(np.uint8)
    if bit_depth == 16:
        return np.rint(data * 65535.0).astype(np.uint16)
    raise InvalidInputError(f"bit_depth must be 8 or 16, got {bit_depth}")


def quantize_like_png(img: ImageTensor, bit_depth: int = 16) -> ImageTensor:
    """Round pixel values to the grid a PNG of the given depth can hold."""
    scale = 255.0 if bit_depth == 8 else 65535.0
    q = _quantize(img.data, bit_depth).astype(np.float64) / scale
    return ImageTensor(q)


def write_gray_png(path: str, values: np.ndarray, bit_depth: int = 8) -> None:
    """Write a single-channel [0, 1] map as a grayscale PNG."""
    _check_png_suffix(path)
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError("expected an HxW map")
    if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
        raise InvalidInputError("map values must be finite and in [0, 1]")
    ok = cv2.imwrite(str(path), _quantize(arr, bit_depth))
    if not ok:
        raise InvalidInputError(f"cannot write image: {path}")


def write_delta_png(path: str, delta: np.ndarray) -> None:
    """Write a signed perturbation as an offset-encoded 16-bit PNG.

    delta in [-1, 1] maps linearly to uint16 [0, 65535]; zero encodes to
    32767.5 rounded. Decode with :func:`read_delta_png`.
    """
    _check_png_suffix(path)
    arr = np.asarray(delta, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("delta contains non-finite values")
    if arr.min() < -1.0 or arr.max() > 1.0:
        raise InvalidInputError("delta values must lie in [-1, 1]")
    enc = np.rint((arr + 1.0) / 2.0 * 65535.0).astype(np.uint16)
    ok = cv2.imwrite(str(path), _to_cv(enc))
    if not ok:
        raise InvalidInputError(f"cannot write image: {path}")


def read_delta_png(path: str) -> np.ndarray:
    """Read a perturbation written by :func:`write_delta_png`."""
    _check_png_signature(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise InvalidInputError(f"cannot read image: {path}")
    if raw.dtype != np.uint16:
        raise InvalidInputError(f"{path}: expected a 16-bit delta PNG")
    arr = raw.astype(np.float64) / 65535.0 * 2.0 - 1.0
    if arr.ndim == 3:
        arr = _to_cv(arr)
    else:
        arr = arr[:, :, None]
    return arr
