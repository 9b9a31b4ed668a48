"""Finite-difference spot checks for oracle gradients.

Any oracle implementation must return gradients that match central finite
differences of its own loss. The surrogate is checked densely in the test
suite; remote sessions are spot-checked at a handful of pixels because
each probe costs two full evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import GuidanceOracle, LspSpec


@dataclass(frozen=True)
class SpotCheckReport:
    checked: int
    worst_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst_rel_error <= self.tolerance


def central_difference(fn, x: np.ndarray, index: tuple, step: float) -> float:
    """Central finite difference of a scalar function at one coordinate."""
    hi = x.copy()
    lo = x.copy()
    hi[index] += step
    lo[index] -= step
    return (fn(hi) - fn(lo)) / (2.0 * step)


def relative_error(analytic: float, estimate: float, floor: float = 1e-8) -> float:
    return abs(analytic - estimate) / max(abs(analytic), abs(estimate), floor)


def spotcheck_lsp_gradient(
    oracle: GuidanceOracle,
    xhat: np.ndarray,
    spec: LspSpec,
    pixels: int = 8,
    step: float = 1e-4,
    tolerance: float = 5e-2,
    seed: int = 0,
) -> SpotCheckReport:
    """Probe the eval_lsp gradient at randomly chosen coordinates.

    The same spec (hence the same stochastic draws) is used for every
    evaluation, so the probes see a deterministic loss surface.
    """
    xhat = np.asarray(xhat, dtype=np.float64)
    analytic = oracle.eval_lsp(xhat, spec).grad
    rng = np.random.default_rng(seed)
    flat_indices = rng.choice(xhat.size, size=min(pixels, xhat.size), replace=False)
    worst = 0.0
    for flat in flat_indices:
        index = np.unravel_index(int(flat), xhat.shape)
        fd = central_difference(
            lambda z: oracle.eval_lsp(z, spec).loss, xhat, index, step
        )
        worst = max(worst, relative_error(float(analytic[index]), fd))
    return SpotCheckReport(len(flat_indices), worst, tolerance)
