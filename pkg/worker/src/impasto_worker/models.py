"""Neural components served by the worker, built on torch.

The suite mirrors the services a latent-diffusion stack provides: an
image encoder/decoder pair around a compact latent, a timestep-
conditioned denoiser driving a deterministic DDIM-style partial
roundtrip, a convolutional feature pyramid for perceptual distances, and
a two-tower image/text embedder for prompt alignment.

Weights are created deterministically from a seed (or loaded from a
directory of state dicts when one is supplied); no pretrained checkpoints
are bundled. Every stochastic draw comes from a per-request generator, so
identical (request, seed) pairs produce identical answers. All modules
run in float64 on CPU; inputs of any resolution are resized to the
working size inside the autograd graph, which keeps returned gradients at
the caller's resolution.
"""

from __future__ import annotations

import hashlib
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

WORKING_SIZE = 512
LATENT_STRIDE = 32
TRAIN_STEPS = 1000
EMBED_DIM = 64


def _generator(seed: int) -> torch.Generator:
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    return gen


def _init_module(module: nn.Module, gen: torch.Generator, gain: float = 1.0) -> None:
    for p in module.parameters():
        if p.ndim > 1:
            fan_in = p[0].numel()
            p.data = torch.randn(p.shape, generator=gen, dtype=torch.float64)
            p.data *= gain / math.sqrt(fan_in)
        else:
            p.data = torch.zeros(p.shape, dtype=torch.float64)
        p.requires_grad_(False)


class Encoder(nn.Module):
    """Local-mean front end followed by a per-position channel MLP.

    The pooling window matches the latent stride, so the latent reacts to
    regional intensity rather than texture phase; a budgeted perturbation
    can therefore move the latent a meaningful distance.
    """

    def __init__(self):
        super().__init__()
        self.mix = nn.Sequential(
            nn.Conv2d(3, 32, 1), nn.GELU(),
            nn.Conv2d(32, 32, 1), nn.GELU(),
            nn.Conv2d(32, 4, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = F.avg_pool2d(x, LATENT_STRIDE)
        return self.mix(pooled)


class Decoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.mix = nn.Sequential(
            nn.Conv2d(4, 32, 1), nn.GELU(),
            nn.Conv2d(32, 3, 1),
        )

    def forward(self, z: torch.Tensor, size: int = WORKING_SIZE) -> torch.Tensor:
        img = F.interpolate(self.mix(z), size=(size, size), mode="bilinear", align_corners=False)
        return 0.5 + 0.5 * torch.tanh(img)


class Denoiser(nn.Module):
    """Noise predictor on the latent, conditioned on the timestep."""

    def __init__(self):
        super().__init__()
        self.time_proj = nn.Linear(8, 32)
        self.inp = nn.Conv2d(4, 32, 3, padding=1)
        self.mid = nn.Conv2d(32, 32, 3, padding=1)
        self.out = nn.Conv2d(32, 4, 3, padding=1)

    @staticmethod
    def _time_features(t: int) -> torch.Tensor:
        pos = torch.tensor(float(t) / TRAIN_STEPS, dtype=torch.float64)
        freqs = torch.tensor([1.0, 2.0, 4.0, 8.0], dtype=torch.float64) * math.pi
        return torch.cat([torch.sin(freqs * pos), torch.cos(freqs * pos)])

    def forward(self, z: torch.Tensor, t: int) -> torch.Tensor:
        bias = self.time_proj(self._time_features(t)).reshape(1, -1, 1, 1)
        h = F.gelu(self.inp(z) + bias)
        h = F.gelu(self.mid(h))
        return self.out(h)


class FeaturePyramid(nn.Module):
    """Three stride-2 conv stages with unit-normalized channels, used both
    for per-pixel perceptual distance maps and the masked feature loss."""

    def __init__(self):
        super().__init__()
        self.stages = nn.ModuleList(
            [
                nn.Conv2d(3, 8, 3, stride=2, padding=1),
                nn.Conv2d(8, 16, 3, stride=2, padding=1),
                nn.Conv2d(16, 16, 3, stride=2, padding=1),
            ]
        )

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for stage in self.stages:
            h = F.gelu(stage(h))
            norm = torch.sqrt((h * h).sum(dim=1, keepdim=True) + 1e-10)
            feats.append(h / norm)
        return feats


class ImageEmbedder(nn.Module):
    def __init__(self):
        super().__init__()
        self.tower = nn.Sequential(
            nn.Conv2d(3, 16, 5, stride=4, padding=2), nn.GELU(),
            nn.Conv2d(16, 32, 5, stride=4, padding=2), nn.GELU(),
            nn.Conv2d(32, 32, 3, stride=4, padding=1), nn.GELU(),
        )
        self.proj = nn.Linear(32, EMBED_DIM)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.tower(x).mean(dim=(2, 3))
        return self.proj(h).squeeze(0)


def prompt_embedding(prompt: str) -> torch.Tensor:
    """Deterministic unit embedding per prompt text."""
    seed = int.from_bytes(hashlib.sha256(prompt.encode()).digest()[:8], "little")
    vec = torch.randn(EMBED_DIM, generator=_generator(seed), dtype=torch.float64)
    return vec / vec.norm()


class ModelSuite:
    """All worker models plus the diffusion schedule, in eval mode."""

    def __init__(self, seed: int = 0, size: int = WORKING_SIZE, weights_dir: str | None = None):
        self.size = size
        self.encoder = Encoder().double()
        self.decoder = Decoder().double()
        self.denoiser = Denoiser().double()
        self.features = FeaturePyramid().double()
        self.embedder = ImageEmbedder().double()
        if weights_dir is None:
            gen = _generator(seed)
            _init_module(self.encoder, gen, gain=2.0)
            _init_module(self.decoder, gen, gain=1.0)
            _init_module(self.denoiser, gen, gain=1.0)
            _init_module(self.features, gen, gain=1.5)
            _init_module(self.embedder, gen, gain=1.5)
        else:
            self._load_weights(Path(weights_dir))
        for module in (self.encoder, self.decoder, self.denoiser, self.features, self.embedder):
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

        betas = torch.linspace(1e-4, 0.02, TRAIN_STEPS, dtype=torch.float64)
        self.alpha_bar = torch.cumprod(1.0 - betas, dim=0)
        self.channel_weights = [
            (torch.randn(c, generator=_generator(seed + 7 + i), dtype=torch.float64).abs() + 0.1)
            for i, c in enumerate((8, 16, 16))
        ]

    def _load_weights(self, root: Path) -> None:
        names = ("encoder", "decoder", "denoiser", "features", "embedder")
        for name in names:
            path = root / f"{name}.pt"
            if not path.is_file():
                raise FileNotFoundError(f"missing weight file: {path}")
            getattr(self, name).load_state_dict(torch.load(path, map_location="cpu"))

    # ---------------------------------------------------------------- I/O

    def _to_batch(
        self, arr: np.ndarray, requires_grad: bool = False
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """HxWxC numpy -> (1x3xSxS graph tensor, caller-resolution leaf)."""
        leaf = torch.from_numpy(np.array(arr, dtype=np.float64))  # owned copy
        leaf = leaf.permute(2, 0, 1).unsqueeze(0)
        leaf.requires_grad_(requires_grad)
        g = leaf.repeat(1, 3, 1, 1) if leaf.shape[1] == 1 else leaf
        if g.shape[2] != self.size or g.shape[3] != self.size:
            g = F.interpolate(g, size=(self.size, self.size), mode="bilinear", align_corners=False)
        return g, leaf

    @staticmethod
    def _grad_of(loss: torch.Tensor, leaf: torch.Tensor) -> np.ndarray:
        (grad,) = torch.autograd.grad(loss, leaf)
        return grad.squeeze(0).permute(1, 2, 0).numpy()

    # ------------------------------------------------------------- services

    def eval_lsp(
        self,
        xhat: np.ndarray,
        target: np.ndarray | None,
        lambda_e: float,
        lambda_sd: float,
        seed: int,
    ) -> tuple[float, float | None, float | None, np.ndarray]:
        g, leaf = self._to_batch(xhat, requires_grad=True)
        z = self.encoder(g)
        loss = torch.zeros((), dtype=torch.float64)
        loss_e = loss_sd = None
        if lambda_e > 0:
            with torch.no_grad():
                zy = self.encoder(self._to_batch(target)[0])
            le = ((z - zy) ** 2).sum()
            loss = loss - lambda_e * le
            loss_e = float(le.detach())
        if lambda_sd > 0:
            gen = _generator(seed)
            t = int(torch.randint(0, TRAIN_STEPS, (1,), generator=gen).item())
            eps = torch.randn(z.shape, generator=gen, dtype=torch.float64)
            ab = self.alpha_bar[t]
            zt = torch.sqrt(ab) * z + torch.sqrt(1.0 - ab) * eps
            lsd = ((eps - self.denoiser(zt, t)) ** 2).sum()
            loss = loss + lambda_sd * lsd
            loss_sd = float(lsd.detach())
        grad = self._grad_of(loss, leaf)
        return float(loss.detach()), loss_e, loss_sd, grad

    def diffusion_roundtrip(self, x: np.ndarray, t: int, total: int, seed: int) -> np.ndarray:
        if not 0 < t <= total:
            raise ValueError(f"need 0 < t <= total, got t={t}, total={total}")
        h, w = x.shape[:2]
        with torch.no_grad():
            g, _ = self._to_batch(x)
            z = self.encoder(g)
            taus = [max(0, round(s * TRAIN_STEPS / total) - 1) for s in range(total + 1)]
            eps = torch.randn(z.shape, generator=_generator(seed), dtype=torch.float64)
            ab_t = self.alpha_bar[taus[t]]
            zt = torch.sqrt(ab_t) * z + torch.sqrt(1.0 - ab_t) * eps
            for s in range(t, 0, -1):
                tau = taus[s]
                ab = self.alpha_bar[tau]
                eps_hat = self.denoiser(zt, tau)
                z0 = (zt - torch.sqrt(1.0 - ab) * eps_hat) / torch.sqrt(ab)
                ab_prev = (
                    self.alpha_bar[taus[s - 1]]
                    if s > 1
                    else torch.tensor(1.0, dtype=torch.float64)
                )
                zt = torch.sqrt(ab_prev) * z0 + torch.sqrt(1.0 - ab_prev) * eps_hat
            img = self.decoder(zt, size=self.size)
            if (h, w) != (self.size, self.size):
                img = F.interpolate(img, size=(h, w), mode="bilinear", align_corners=False)
        out = img.squeeze(0).permute(1, 2, 0).numpy()
        if x.shape[2] == 1:
            out = out.mean(axis=2, keepdims=True)
        return out

    def spatial_distance(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        h, w = a.shape[:2]
        with torch.no_grad():
            fa = self.features(self._to_batch(a)[0])
            fb = self.features(self._to_batch(b)[0])
            total = torch.zeros((1, 1, h, w), dtype=torch.float64)
            for la, lb, cw in zip(fa, fb, self.channel_weights):
                diff = (cw.reshape(1, -1, 1, 1) * (la - lb)) ** 2
                layer_map = diff.sum(dim=1, keepdim=True)
                total = total + F.interpolate(
                    layer_map, size=(h, w), mode="bilinear", align_corners=False
                )
        return (total / len(fa)).squeeze(0).squeeze(0).numpy()

    def lpips_masked(
        self, x: np.ndarray, xhat: np.ndarray, mask: np.ndarray
    ) -> tuple[float, np.ndarray]:
        with torch.no_grad():
            ref = self.features(self._to_batch(x)[0])
        g, leaf = self._to_batch(xhat, requires_grad=True)
        cur = self.features(g)
        m = torch.from_numpy(np.ascontiguousarray(mask, dtype=np.float64))
        m = m.unsqueeze(0).unsqueeze(0)
        loss = torch.zeros((), dtype=torch.float64)
        for fr, fc, cw in zip(ref, cur, self.channel_weights):
            hl, wl = fr.shape[2], fr.shape[3]
            ml = F.adaptive_avg_pool2d(m, (hl, wl))
            diff = (cw.reshape(1, -1, 1, 1) * (fc - fr)) ** 2
            loss = loss + (ml * diff.sum(dim=1, keepdim=True)).sum() / (hl * wl)
        grad = self._grad_of(loss, leaf)
        return float(loss.detach()), grad

    def clip_align(self, xhat: np.ndarray, prompt: str) -> tuple[float, np.ndarray]:
        g, leaf = self._to_batch(xhat, requires_grad=True)
        emb = self.embedder(g)
        loss = -F.cosine_similarity(emb, prompt_embedding(prompt), dim=0)
        grad = self._grad_of(loss, leaf)
        return float(loss.detach()), grad
