"""Deterministic analytic stand-in for the neural guidance oracle.

Every operation is a small closed-form computation with an exact
gradient, sized so the full protection loop runs in milliseconds at desk
scale. None of it is a diffusion model, a perceptual network, or a text
encoder; the shapes and contracts match the real services, the semantics
do not. Use it for tests, development, and algorithm work only.

* protection loss: squared distances under fixed seeded linear
  projections A (encoder term, against the target) and C (denoiser
  term), 64 output dimensions regardless of image size. Inputs beyond
  64 px per side are block-mean pooled first (an exact linear front),
  which keeps the dense projections desk-sized at any resolution.
* diffusion roundtrip: unsharp masking, x + 1.5 * (x - blur5(x)), which
  amplifies high-frequency content the way a partial noising/denoising
  pass tends to.
* spatial distance: channel-mean squared difference, 7x7 box smoothed.
* feature extractor: two fixed seeded 3x3 convolutions with stride 2 and
  absolute-value nonlinearity.
* alignment: cosine against a fixed unit prompt vector under a third
  seeded projection.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from ..errors import InvalidInputError, InvalidOracleError
from .base import (
    Capability,
    GuidanceOracle,
    LspResult,
    LspSpec,
    MaskedLoss,
    check_roundtrip_steps,
    require_finite,
)

PROJECTION_SEED = 0x1A57
PROJECTION_DIM = 64

#: side length above which inputs are block-mean pooled before projection
POOL_LIMIT = 64

ROUNDTRIP_KAPPA = 1.5

# separable binomial approximation of a 5x5 Gaussian
_BLUR_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur5(img: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        tmp = ndimage.correlate1d(img[:, :, c], _BLUR_TAPS, axis=0, mode="nearest")
        out[:, :, c] = ndimage.correlate1d(tmp, _BLUR_TAPS, axis=1, mode="nearest")
    return out


class SurrogateExtractor:
    """Two-layer seeded convolution stack used by the masked feature loss.

    Layer l maps to ceil(H / 2^l) x ceil(W / 2^l) with 8 channels each;
    the nonlinearity is |.| and all channel weights are 1.
    """

    def __init__(self, channels_in: int = 3, seed: int = PROJECTION_SEED):
        rng = np.random.default_rng(seed)
        self.k1 = rng.normal(0.0, 1.0, size=(3, 3, channels_in, 8)) / 3.0
        self.k2 = rng.normal(0.0, 1.0, size=(3, 3, 8, 8)) / (3.0 * np.sqrt(8))

    @staticmethod
    def _conv(x: np.ndarray, kern: np.ndarray) -> np.ndarray:
        h, w, _ = x.shape
        ho, wo = (h + 1) // 2, (w + 1) // 2
        xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
        out = np.zeros((ho, wo, kern.shape[3]))
        for di in range(3):
            for dj in range(3):
                rows = xp[di : di + 2 * ho - 1 : 2]
                patch = rows[:, dj : dj + 2 * wo - 1 : 2]
                out += np.einsum("ijc,co->ijo", patch, kern[di, dj])
        return out

    @staticmethod
    def _conv_vjp(cot: np.ndarray, kern: np.ndarray, in_shape) -> np.ndarray:
        h, w, _ = in_shape
        ho, wo = cot.shape[:2]
        gp = np.zeros((h + 2, w + 2, in_shape[2]))
        for di in range(3):
            for dj in range(3):
                chunk = np.einsum("ijo,co->ijc", cot, kern[di, dj])
                gp[di : di + 2 * ho - 1 : 2, dj : dj + 2 * wo - 1 : 2] += chunk
        return gp[1 : h + 1, 1 : w + 1]

    def features(self, img: np.ndarray) -> list[np.ndarray]:
        z1 = self._conv(img, self.k1)
        f1 = np.abs(z1)
        z2 = self._conv(f1, self.k2)
        return [f1, np.abs(z2)]

    def channel_weights(self) -> list[np.ndarray]:
        return [np.ones(8), np.ones(8)]

    def feature_vjp(self, img: np.ndarray, cotangents: list[np.ndarray]) -> np.ndarray:
        z1 = self._conv(img, self.k1)
        f1 = np.abs(z1)
        z2 = self._conv(f1, self.k2)
        cot_f1 = cotangents[0] + self._conv_vjp(
            cotangents[1] * np.sign(z2), self.k2, f1.shape
        )
        return self._conv_vjp(cot_f1 * np.sign(z1), self.k1, img.shape)


class SurrogateOracle(GuidanceOracle):
    """Analytic oracle; see the module docstring for what each op computes."""

    def __init__(self, seed: int = PROJECTION_SEED):
        self._seed = seed
        self._proj_cache: dict[int, tuple[np.ndarray, ...]] = {}
        self._extractors: dict[int, SurrogateExtractor] = {}

    def capabilities(self) -> frozenset[Capability]:
        return frozenset(Capability)

    # projections A (encoder), C (denoiser), U (embedding), p (prompt) are
    # drawn once per flattened input size from the fixed seed
    def _projections(self, dim: int) -> tuple[np.ndarray, ...]:
        if dim not in self._proj_cache:
            rng = np.random.default_rng(self._seed)
            scale = 1.0 / np.sqrt(dim)
            a = rng.normal(0.0, scale, size=(PROJECTION_DIM, dim))
            c = rng.normal(0.0, scale, size=(PROJECTION_DIM, dim))
            u = rng.normal(0.0, scale, size=(PROJECTION_DIM, dim))
            p = rng.normal(0.0, 1.0, size=PROJECTION_DIM)
            p /= np.linalg.norm(p)
            self._proj_cache[dim] = (a, c, u, p)
        return self._proj_cache[dim]

    def _extractor(self, channels: int) -> SurrogateExtractor:
        if channels not in self._extractors:
            self._extractors[channels] = SurrogateExtractor(channels, self._seed)
        return self._extractors[channels]

    # images larger than POOL_LIMIT per side are block-mean pooled before the
    # vec projection; otherwise the dense projection matrices grow with the
    # pixel count (hundreds of MB at 512x512). Pooling is an exact linear op,
    # so gradients stay exact; inputs up to 64 px per side are untouched.
    @staticmethod
    def _pool_block(shape: tuple[int, ...]) -> int:
        return max(1, (max(shape[0], shape[1]) + POOL_LIMIT - 1) // POOL_LIMIT)

    @staticmethod
    def _pool(img: np.ndarray, block: int) -> np.ndarray:
        if block == 1:
            return img
        h, w, c = img.shape
        ph, pw = -h % block, -w % block
        counts = np.ones((h, w, 1))
        if ph or pw:
            img = np.pad(img, ((0, ph), (0, pw), (0, 0)))
            counts = np.pad(counts, ((0, ph), (0, pw), (0, 0)))
        hb, wb = img.shape[0] // block, img.shape[1] // block
        sums = img.reshape(hb, block, wb, block, c).sum(axis=(1, 3))
        n = counts.reshape(hb, block, wb, block, 1).sum(axis=(1, 3))
        return sums / n

    @staticmethod
    def _pool_vjp(cot: np.ndarray, block: int, shape: tuple[int, ...]) -> np.ndarray:
        if block == 1:
            return cot
        h, w, c = shape
        counts = np.ones((h, w, 1))
        ph, pw = -h % block, -w % block
        if ph or pw:
            counts = np.pad(counts, ((0, ph), (0, pw), (0, 0)))
        hb, wb = counts.shape[0] // block, counts.shape[1] // block
        n = counts.reshape(hb, block, wb, block, 1).sum(axis=(1, 3))
        spread = np.repeat(np.repeat(cot / n, block, axis=0), block, axis=1)
        return spread[:h, :w]

    def eval_lsp(self, xhat: np.ndarray, spec: LspSpec) -> LspResult:
        xhat = np.asarray(xhat, dtype=np.float64)
        block = self._pool_block(xhat.shape)
        pooled = self._pool(xhat, block)
        v = pooled.ravel()
        a, c, _, _ = self._projections(v.size)
        loss = 0.0
        grad_v = np.zeros_like(v)
        loss_e = loss_sd = None
        if spec.lambda_e > 0:
            target = np.asarray(spec.target.data, dtype=np.float64)
            if target.shape != xhat.shape:
                raise InvalidInputError("target extent differs from input")
            r = a @ v - a @ self._pool(target, block).ravel()
            loss_e = float(r @ r)
            loss -= spec.lambda_e * loss_e
            grad_v -= spec.lambda_e * 2.0 * (a.T @ r)
        if spec.lambda_sd > 0:
            s = c @ v
            loss_sd = float(s @ s)
            loss += spec.lambda_sd * loss_sd
            grad_v += spec.lambda_sd * 2.0 * (c.T @ s)
        grad = self._pool_vjp(grad_v.reshape(pooled.shape), block, xhat.shape)
        require_finite("lsp gradient", grad)
        return LspResult(loss, grad, loss_e, loss_sd)

    def diffusion_roundtrip(
        self, x: np.ndarray, t: int = 5, total: int = 25, seed: int = 0
    ) -> np.ndarray:
        check_roundtrip_steps(t, total)
        x = np.asarray(x, dtype=np.float64)
        return x + ROUNDTRIP_KAPPA * (x - _blur5(x))

    def spatial_distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        if a.shape != b.shape:
            raise InvalidInputError("images must share the same extent")
        sq = ((a - b) ** 2).mean(axis=2)
        return ndimage.uniform_filter(sq, size=7, mode="nearest")

    def masked_lpips(
        self, x: np.ndarray, xhat: np.ndarray, mask: np.ndarray
    ) -> MaskedLoss:
        from ..constraints import masked_lpips_loss

        feat = self._extractor(np.asarray(x).shape[2])
        loss, grad = masked_lpips_loss(x, xhat, mask, feat)
        return MaskedLoss(loss, grad)

    def clip_alignment(self, xhat: np.ndarray, prompt: str = "Noise-free image") -> MaskedLoss:
        xhat = np.asarray(xhat, dtype=np.float64)
        block = self._pool_block(xhat.shape)
        pooled = self._pool(xhat, block)
        v = pooled.ravel()
        _, _, u, p = self._projections(v.size)
        e = u @ v
        norm = np.linalg.norm(e)
        if norm == 0:
            raise InvalidOracleError("image embedding has zero norm")
        cos = float(e @ p) / norm  # p is unit norm
        # d(-cos)/de, then pull back through the projection and the pooling
        grad_e = -(p / norm - (e @ p) * e / norm**3)
        grad = self._pool_vjp(
            (u.T @ grad_e).reshape(pooled.shape), block, xhat.shape
        )
        require_finite("alignment gradient", grad)
        return MaskedLoss(-cos, grad)
