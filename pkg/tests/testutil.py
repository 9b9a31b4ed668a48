import numpy as np

from impasto.image import ImageTensor


def random_image(rng, h=32, w=32, c=3, lo=0.05, hi=0.95) -> ImageTensor:
    return ImageTensor(rng.uniform(lo, hi, size=(h, w, c)))


def smooth_image(rng, h=32, w=32, c=3, amplitude=0.3) -> ImageTensor:
    """Mid-gray field with a few low-frequency waves plus light texture."""
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    arr = np.full((h, w, c), 0.5)
    for ch in range(c):
        fy, fx = rng.uniform(1.0, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        arr[:, :, ch] += amplitude * 0.5 * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    arr += rng.normal(0.0, 0.02, size=arr.shape)
    return ImageTensor(np.clip(arr, 0.0, 1.0))


def replicate_window(plane: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    """Edge-replicated window around (row, col), computed without scipy."""
    half = size // 2
    rows = np.clip(np.arange(row - half, row + half + 1), 0, plane.shape[0] - 1)
    cols = np.clip(np.arange(col - half, col + half + 1), 0, plane.shape[1] - 1)
    return plane[np.ix_(rows, cols)]


def finite_difference(fn, x: np.ndarray, index, step=1e-6) -> float:
    hi = x.copy()
    lo = x.copy()
    hi[index] += step
    lo[index] -= step
    return (fn(hi) - fn(lo)) / (2.0 * step)


def rel_err(a: float, b: float, floor=1e-9) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
