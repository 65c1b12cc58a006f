"""Variance-preserving diffusion over a pooled image latent.

Conventions: ``alpha[t-1]`` and ``beta[t-1]`` hold the signal and noise
coefficients at step t (1-based), with alpha^2 + beta^2 = 1, so
``x_t = alpha_t * x0 + beta_t * eps``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractViolation
from .numerics import derive_seed, torch_generator


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha: np.ndarray
    beta: np.ndarray
    kind: str = "cosine"

    def validate(self) -> None:
        if np.abs(self.alpha ** 2 + self.beta ** 2 - 1.0).max() > 1e-12:
            raise ContractViolation("schedule is not variance preserving")
        if not (np.diff(self.alpha) < 0).all():
            raise ContractViolation("alpha must be strictly decreasing")

    def coeffs(self, t) -> tuple:
        t = torch.as_tensor(t, dtype=torch.long)
        if (t < 1).any() or (t > self.T).any():
            raise ContractViolation(f"timestep outside 1..{self.T}")
        a = torch.as_tensor(self.alpha)[t - 1]
        b = torch.as_tensor(self.beta)[t - 1]
        return a, b


def make_schedule(T: int, kind: str = "cosine", max_step_beta: float = 0.999) -> NoiseSchedule:
    """Cosine (default) or linear variance-preserving schedule with T steps."""
    if T < 2:
        raise ConfigurationError(f"T must be >= 2, got {T}")
    if kind == "cosine":
        s = 0.008
        f = lambda t: np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
        abar_raw = f(np.arange(T + 1, dtype=np.float64)) / f(0.0)
        step_beta = np.clip(1.0 - abar_raw[1:] / abar_raw[:-1], 0.0, max_step_beta)
    elif kind == "linear":
        scale = 1000.0 / T
        step_beta = np.linspace(scale * 1e-4, min(scale * 0.02, max_step_beta), T, dtype=np.float64)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}")
    abar = np.cumprod(1.0 - step_beta)
    sched = NoiseSchedule(T=T, alpha=np.sqrt(abar), beta=np.sqrt(1.0 - abar), kind=kind)
    sched.validate()
    return sched


def add_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """alpha_t * x0 + beta_t * eps; ``t`` is an int or a (B,) tensor."""
    if eps.shape != x0.shape:
        raise ContractViolation(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    a, b = schedule.coeffs(t)
    shape = (-1,) + (1,) * (x0.ndim - 1) if a.ndim else ()
    a = a.to(x0.dtype).reshape(shape)
    b = b.to(x0.dtype).reshape(shape)
    return a * x0 + b * eps


# ---------------------------------------------------------------------------
# latent <-> image


def image_to_latent(image: torch.Tensor, factor: int = 4) -> torch.Tensor:
    """(B, 3, H, W) in [0, 1] -> average-pooled latent in [-1, 1]."""
    return F.avg_pool2d(image, factor) * 2.0 - 1.0 if factor > 1 else image * 2.0 - 1.0


def latent_to_image(z: torch.Tensor, factor: int = 4) -> torch.Tensor:
    up = F.interpolate(z, scale_factor=factor, mode="bilinear", align_corners=False) if factor > 1 else z
    return ((up + 1.0) / 2.0).clamp(0.0, 1.0)


# ---------------------------------------------------------------------------
# conditional noise predictor D_phi'


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _gn(c: int) -> nn.GroupNorm:
    return nn.GroupNorm(math.gcd(c, 8), c)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = _gn(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * c_out)
        self.norm2 = _gn(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(emb)[..., None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


@dataclass
class DecoderConfig:
    latent_channels: int = 3
    width: int = 48
    cond_channels: int = 16
    emb_dim: int = 64
    level_channels: tuple = (16, 32, 64)
    code_dim: int = 32
    latent_factor: int = 4  # latent stride relative to the image
    T: int = 100
    schedule: str = "cosine"
    output: str = "v"  # what the network body predicts: "eps" or "v"
    code_map: int = 8  # channels of the lighting code tiled over the input


class DiffusionDecoder(nn.Module):
    """Two-scale U-Net predicting the noise in x_t.

    Conditioning: each ALI level goes through a 1x1 projection, is resized to
    whichever decoder scale (latent stride, 2x latent stride) is nearest its
    own stride, and concatenated to the activations there. The lighting code
    is projected and added to the timestep embedding, and also tiled over
    the input as ``code_map`` channels.

    With ``output="v"`` the body predicts v = alpha*eps - beta*x0 and the
    module returns eps = alpha*v + beta*x_t, so it is still a noise
    predictor but its x0 estimate stays usable at high noise.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        w, e = cfg.width, cfg.emb_dim
        self.t_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.code_proj = nn.Linear(cfg.code_dim, e)
        if cfg.output not in ("eps", "v"):
            raise ConfigurationError(f"unknown decoder output {cfg.output!r}")
        self.code_map = nn.Linear(cfg.code_dim, cfg.code_map) if cfg.code_map else None
        self.schedule = make_schedule(cfg.T, cfg.schedule)
        self.cond_proj = nn.ModuleList(nn.Conv2d(c, cfg.cond_channels, 1) for c in cfg.level_channels)
        # level i (0-based) has stride 2^(i+1); scale 0 has stride latent_factor
        base = int(round(math.log2(cfg.latent_factor)))
        self.level_scale = [min(1, max(0, i + 1 - base)) for i in range(len(cfg.level_channels))]
        n_cond = [self.level_scale.count(k) * cfg.cond_channels for k in (0, 1)]
        self.inp = nn.Conv2d(cfg.latent_channels + cfg.code_map + n_cond[0], w, 3, padding=1)
        self.enc0 = ResBlock(w, w, e)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc1 = ResBlock(w + n_cond[1], 2 * w, e)
        self.mid = ResBlock(2 * w, 2 * w, e)
        self.dec1 = ResBlock(2 * w + w, w, e)
        self.dec0 = ResBlock(w, w, e)
        self.out_norm = _gn(w)
        self.out = nn.Conv2d(w, cfg.latent_channels, 3, padding=1)

    def forward(self, x_t: torch.Tensor, t, cond_intrinsics: Sequence[torch.Tensor], cond_lighting: torch.Tensor):
        B = x_t.shape[0]
        if len(cond_intrinsics) != len(self.cond_proj):
            raise ContractViolation(f"expected {len(self.cond_proj)} ALI levels, got {len(cond_intrinsics)}")
        if x_t.shape[-1] % 2 or x_t.shape[-2] % 2:
            raise ContractViolation("latent size must be even")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(B)
        emb = timestep_embedding(t, self.cfg.emb_dim).to(x_t.dtype)
        emb = self.t_mlp(emb) + self.code_proj(cond_lighting)
        sizes = [x_t.shape[-2:], (x_t.shape[-2] // 2, x_t.shape[-1] // 2)]
        conds = ([], [])
        for A, proj, k in zip(cond_intrinsics, self.cond_proj, self.level_scale):
            c = proj(A)
            if c.shape[-2:] != sizes[k]:
                c = F.adaptive_avg_pool2d(c, sizes[k]) if c.shape[-1] > sizes[k][-1] else F.interpolate(c, size=sizes[k], mode="nearest")
            conds[k].append(c)
        if self.code_map is not None:
            conds[0].insert(0, self.code_map(cond_lighting)[..., None, None].expand(-1, -1, *sizes[0]))
        h0 = self.enc0(self.inp(torch.cat([x_t, *conds[0]], 1)), emb)
        h1 = self.down(h0)
        h1 = self.mid(self.enc1(torch.cat([h1, *conds[1]], 1), emb), emb)
        u = F.interpolate(h1, scale_factor=2, mode="nearest")
        u = self.dec0(self.dec1(torch.cat([u, h0], 1), emb), emb)
        out = self.out(F.silu(self.out_norm(u)))
        if self.cfg.output == "eps":
            return out
        a, b = (c.to(x_t.dtype).reshape(B, 1, 1, 1) for c in self.schedule.coeffs(t))
        return a * out + b * x_t


EpsModel = Callable[..., torch.Tensor]


def ddpm_loss(decoder: EpsModel, x0: torch.Tensor, cond_intrinsics, cond_lighting, schedule: NoiseSchedule,
              seed: int) -> torch.Tensor:
    """E_{t, eps} ||D(alpha_t x0 + beta_t eps, t, cond) - eps||^2, averaged
    over elements; t ~ U{1..T}, eps ~ N(0, I), both drawn from ``seed``."""
    if x0.shape[0] == 0:
        raise ContractViolation("empty batch")
    g = torch_generator(seed, "ddpm-loss")
    t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=g)
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64).to(x0.dtype)
    x_t = add_noise(x0, t, eps, schedule)
    eps_hat = decoder(x_t, t, cond_intrinsics, cond_lighting)
    return ((eps_hat - eps) ** 2).mean()


def sampling_timesteps(T: int, steps: int) -> List[int]:
    """Evenly spaced descending subset of 1..T that always contains T and 1."""
    steps = max(1, min(int(steps), T))
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def _noise(shape, seeds: Sequence[int], tag, dtype) -> torch.Tensor:
    return torch.stack([
        torch.randn(shape, generator=torch_generator(s, "sample", tag), dtype=torch.float64) for s in seeds
    ]).to(dtype)


@torch.no_grad()
def sample(decoder: EpsModel, cond_intrinsics, cond_lighting, schedule: NoiseSchedule, steps: int = 50,
           seed: Union[int, Sequence[int]] = 0, shape: Optional[tuple] = None, clip: float = 1.0) -> torch.Tensor:
    """Ancestral sampling on a respaced schedule.

    ``seed`` may be one int for the whole batch or one per item; item noise is
    drawn from its own stream, so an item's sample does not depend on its
    batch-mates. Returns latents clamped to [-clip, clip].
    """
    B = cond_lighting.shape[0]
    if isinstance(seed, (int, np.integer)):
        seeds = [derive_seed(int(seed), "item", b) for b in range(B)]
    else:
        seeds = [int(s) for s in seed]
    if len(seeds) != B:
        raise ContractViolation(f"{len(seeds)} seeds for a batch of {B}")
    if shape is None:
        f = getattr(decoder, "cfg", DecoderConfig()).latent_factor
        H = cond_intrinsics[0].shape[-2] * 2 // f
        W = cond_intrinsics[0].shape[-1] * 2 // f
        shape = (getattr(decoder, "cfg", DecoderConfig()).latent_channels, H, W)
    dtype = cond_lighting.dtype
    ts = sampling_timesteps(schedule.T, steps)
    abar = schedule.alpha ** 2
    x = _noise(shape, seeds, "init", dtype)
    for k, t in enumerate(ts):
        ab_t = abar[t - 1]
        ab_prev = abar[ts[k + 1] - 1] if k + 1 < len(ts) else 1.0
        step_beta = 1.0 - ab_t / ab_prev
        eps_hat = decoder(x, torch.full((B,), t, dtype=torch.long), cond_intrinsics, cond_lighting)
        x0_hat = ((x - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)).clamp(-clip, clip)
        if k + 1 == len(ts):
            x = x0_hat
            break
        c0 = math.sqrt(ab_prev) * step_beta / (1.0 - ab_t)
        ct = math.sqrt(1.0 - step_beta) * (1.0 - ab_prev) / (1.0 - ab_t)
        var = step_beta * (1.0 - ab_prev) / (1.0 - ab_t)
        x = c0 * x0_hat + ct * x + math.sqrt(var) * _noise(shape, seeds, t, dtype)
    return x.clamp(-clip, clip)
