"""Latent-intrinsics encoder/decoder, frozen visual priors and hypercolumns.

The relighting encoder maps an image to a hierarchy of intrinsic maps plus a
global lighting code; the base decoder inverts that pair. Visual priors are
small conv encoders of identical architecture whose weights come from one of
three recipes (random, masked reconstruction, contrastive), so a comparison
between them isolates the training objective.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from safetensors.torch import load_file, save_file

from .errors import ConfigurationError, ContractViolation, TrainingError
from .numerics import digest, seed_stream, torch_generator

logger = logging.getLogger(__name__)

PRIOR_KINDS = ("random_frozen", "recon_pretrained", "contrastive_pretrained")
KIND_ALIASES = {"random": "random_frozen", "recon": "recon_pretrained", "contrastive": "contrastive_pretrained"}


def to_nchw(images) -> torch.Tensor:
    """(B, H, W, 3) or (H, W, 3) array/tensor in [0, 1] -> float (B, 3, H, W)."""
    x = torch.as_tensor(np.asarray(images)) if not isinstance(images, torch.Tensor) else images
    if x.ndim == 3:
        x = x[None]
    if x.shape[-1] == 3 and x.shape[1] != 3:
        x = x.permute(0, 3, 1, 2)
    return x.contiguous()


def to_nhwc(x: torch.Tensor) -> np.ndarray:
    return x.detach().permute(0, 2, 3, 1).cpu().numpy()


def _groups(c: int) -> int:
    return math.gcd(c, 8) or 1


class ConvBlock(nn.Module):
    """Strided conv + conv, each followed by GroupNorm and SiLU."""

    def __init__(self, c_in: int, c_out: int, stride: int = 2):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)

    def forward(self, x):
        x = F.silu(self.norm1(self.conv1(x)))
        return F.silu(self.norm2(self.conv2(x)))


# ---------------------------------------------------------------------------
# relighting encoder E_theta and base decoder D_phi


@dataclass
class EncoderConfig:
    channels: Tuple[int, ...] = (16, 32, 64)
    code_dim: int = 32
    in_channels: int = 3

    @property
    def levels(self) -> int:
        return len(self.channels)


class IntrinsicEncoder(nn.Module):
    """Image -> ([S_1..S_L], L). Level i has stride 2^i.

    Each level's intrinsic map is a 1x1 head on the trunk, so the trunk's
    deepest map can also feed the lighting head without forcing S_L itself to
    carry lighting.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        if cfg.levels < 2:
            raise ConfigurationError("the intrinsic hierarchy needs at least 2 levels")
        self.cfg = cfg
        blocks, heads = [], []
        c_prev = cfg.in_channels
        for c in cfg.channels:
            blocks.append(ConvBlock(c_prev, c))
            heads.append(nn.Conv2d(c, c, 1))
            c_prev = c
        self.blocks = nn.ModuleList(blocks)
        self.heads = nn.ModuleList(heads)
        self.light_head = nn.Linear(cfg.channels[-1], cfg.code_dim)

    def forward(self, x: torch.Tensor):
        H, W = x.shape[-2:]
        f = 2 ** self.cfg.levels
        if H % f or W % f:
            raise ContractViolation(f"input {H}x{W} not divisible by 2^{self.cfg.levels}")
        x = x * 2.0 - 1.0
        stack = []
        for block, head in zip(self.blocks, self.heads):
            x = block(x)
            stack.append(head(x))
        code = self.light_head(x.mean(dim=(2, 3)))
        return stack, code


class FiLM(nn.Module):
    def __init__(self, code_dim: int, channels: int):
        super().__init__()
        self.lin = nn.Linear(code_dim, 2 * channels)
        self.zero_init()

    def zero_init(self):
        with torch.no_grad():
            self.lin.weight.zero_()
            self.lin.bias.zero_()

    def forward(self, x, code):
        scale, shift = self.lin(code)[..., None, None].chunk(2, dim=1)
        return x * (1 + scale) + shift


class BaseDecoder(nn.Module):
    """({S_i}, L) -> image, coarse to fine, every stage modulated by the code."""

    def __init__(self, cfg: EncoderConfig, width: int = 32):
        super().__init__()
        ch = list(cfg.channels)
        self.inp = nn.Conv2d(ch[-1], width, 3, padding=1)
        self.film_in = FiLM(cfg.code_dim, width)
        self.ups = nn.ModuleList()
        self.films = nn.ModuleList()
        for c in reversed(ch[:-1]):
            self.ups.append(nn.Sequential(
                nn.Conv2d(width + c, width, 3, padding=1), nn.GroupNorm(_groups(width), width), nn.SiLU(),
                nn.Conv2d(width, width, 3, padding=1),
            ))
            self.films.append(FiLM(cfg.code_dim, width))
        self.final = nn.Sequential(
            nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.Conv2d(width, cfg.in_channels, 3, padding=1)
        )
        self.final_film = FiLM(cfg.code_dim, width)

    def forward(self, stack: Sequence[torch.Tensor], code: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.film_in(self.inp(stack[-1]), code))
        for up, film, skip in zip(self.ups, self.films, reversed(stack[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = F.silu(film(up(torch.cat([h, skip], 1)), code))
        h = F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False)
        h = self.final_film(h, code)
        return torch.sigmoid(self.final(h))


# ---------------------------------------------------------------------------
# visual priors


@dataclass
class VisualPriorConfig:
    prior_kind: str = "random_frozen"
    channels: Tuple[int, ...] = (8, 16, 32)
    selected_layers: Tuple[int, ...] = ()  # 1-based block indices; empty = evenly spaced
    n_layers: int = 3
    seed: int = 0
    pretrain_steps: int = 0

    def __post_init__(self):
        self.prior_kind = KIND_ALIASES.get(self.prior_kind, self.prior_kind)
        self.channels = tuple(int(c) for c in self.channels)
        if not self.selected_layers:
            n = min(self.n_layers, len(self.channels))
            self.selected_layers = tuple(int(round(v)) for v in np.linspace(1, len(self.channels), n))
        self.selected_layers = tuple(int(i) for i in self.selected_layers)

    def validate(self) -> None:
        if self.prior_kind not in PRIOR_KINDS:
            raise ConfigurationError(f"unknown prior kind {self.prior_kind!r}")
        if len(self.selected_layers) < 1:
            raise ConfigurationError("select at least one prior layer")
        for i in self.selected_layers:
            if not 1 <= i <= len(self.channels):
                raise ConfigurationError(f"layer index {i} out of range 1..{len(self.channels)}")

    @property
    def hyper_channels(self) -> int:
        return sum(self.channels[i - 1] for i in self.selected_layers)

    def to_dict(self) -> dict:
        return asdict(self)


class PriorEncoder(nn.Module):
    def __init__(self, channels: Sequence[int], in_channels: int = 3):
        super().__init__()
        blocks, c_prev = [], in_channels
        for c in channels:
            blocks.append(ConvBlock(c_prev, c))
            c_prev = c
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x, upto: Optional[int] = None) -> List[torch.Tensor]:
        x = x * 2.0 - 1.0
        outs = []
        for k, block in enumerate(self.blocks):
            if upto is not None and k >= upto:
                break
            x = block(x)
            outs.append(x)
        return outs


class VisualPrior(nn.Module):
    """A frozen feature extractor plus its config and provenance."""

    def __init__(self, cfg: VisualPriorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = PriorEncoder(cfg.channels)
        init_weights(self.encoder, cfg.seed, "prior-init")
        # pretraining leftovers (contrastive head, recon decoder); not features
        self.aux = nn.ModuleDict()
        self.freeze()

    def freeze(self) -> "VisualPrior":
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def named_state(self) -> dict:
        return {k: v.detach().clone() for k, v in self.encoder.state_dict().items()}

    def digest(self) -> str:
        return digest(self.encoder.state_dict())

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        return prior_features(x, self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {**self.cfg.to_dict(), "layers": list(self.cfg.selected_layers), "digest": self.digest(),
                "aux": sorted(self.aux.keys())}
        tensors = {f"encoder.{k}": v.contiguous() for k, v in self.encoder.state_dict().items()}
        tensors.update({f"aux.{k}": v.contiguous() for k, v in self.aux.state_dict().items()})
        save_file(tensors, str(path), metadata={"ali_prior": json.dumps(meta, sort_keys=True)})
        return path

    @classmethod
    def load(cls, path) -> "VisualPrior":
        from safetensors import safe_open

        with safe_open(str(path), framework="pt") as fh:
            meta = json.loads(fh.metadata()["ali_prior"])
        cfg = VisualPriorConfig(prior_kind=meta["prior_kind"], channels=tuple(meta["channels"]),
                                selected_layers=tuple(meta["selected_layers"]), seed=int(meta["seed"]),
                                pretrain_steps=int(meta.get("pretrain_steps", 0)))
        prior = cls(cfg)
        tensors = load_file(str(path))
        prior.encoder.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")})
        if "head" in meta.get("aux", []):
            prior.aux["head"] = ContrastiveHead(cfg.channels[-1])
        if "decoder" in meta.get("aux", []):
            prior.aux["decoder"] = ReconDecoder(cfg.channels)
        prior.aux.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("aux.")})
        prior.freeze()
        if prior.digest() != meta["digest"]:
            raise ContractViolation(f"prior archive {path} fails its digest check")
        return prior


def init_weights(module: nn.Module, seed: int, *names) -> None:
    """Deterministic init independent of the global torch RNG."""
    g = torch_generator(seed, *names)
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if p.ndim >= 2:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_((torch.rand(p.shape, generator=g, dtype=torch.float64) * 2 - 1).to(p.dtype) * bound * math.sqrt(3))
            elif name.endswith("weight"):
                p.fill_(1.0)
            else:
                p.zero_()
    for m in module.modules():
        if isinstance(m, FiLM):
            m.zero_init()


def prior_features(image, prior: VisualPrior) -> List[torch.Tensor]:
    """Selected feature maps of the frozen prior, gradients disabled."""
    prior.cfg.validate()
    x = to_nchw(image).to(next(prior.parameters()).dtype)
    with torch.no_grad():
        outs = prior.encoder(x, upto=max(prior.cfg.selected_layers))
    return [outs[i - 1] for i in prior.cfg.selected_layers]


def extract_hypercolumn(feature_maps: Sequence[torch.Tensor], size: Optional[Tuple[int, int]] = None) -> torch.Tensor:
    """Bilinearly upsample each (B, C_k, h_k, w_k) map to ``size`` and
    concatenate channels in layer order -> (B, sum C_k, H, W)."""
    if len(feature_maps) == 0:
        raise ContractViolation("hypercolumn needs at least one feature map")
    maps = [torch.as_tensor(m) for m in feature_maps]
    maps = [m[None] if m.ndim == 3 else m for m in maps]
    if size is None:
        size = tuple(maps[0].shape[-2:])
    ups = [F.interpolate(m, size=size, mode="bilinear", align_corners=False) for m in maps]
    return torch.cat(ups, dim=1)


# ---------------------------------------------------------------------------
# prior pretraining


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 2e-3
    mask_ratio: float = 0.5
    mask_patch: int = 8
    temperature: float = 0.2
    jitter: float = 0.2
    seed: int = 0
    log_every: int = 50

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class ReconDecoder(nn.Module):
    """U-shaped decoder over every prior block's output."""

    def __init__(self, channels: Sequence[int], out_channels: int = 3):
        super().__init__()
        ch = list(channels)
        self.ups = nn.ModuleList()
        c_prev = ch[-1]
        for c in reversed(ch[:-1]):
            self.ups.append(nn.Sequential(nn.Conv2d(c_prev + c, c, 3, padding=1), nn.SiLU()))
            c_prev = c
        self.out = nn.Sequential(nn.Conv2d(c_prev + out_channels, c_prev, 3, padding=1), nn.SiLU(),
                                 nn.Conv2d(c_prev, out_channels, 3, padding=1))

    def forward(self, feats: List[torch.Tensor], masked_input: torch.Tensor) -> torch.Tensor:
        h = feats[-1]
        for up, skip in zip(self.ups, reversed(feats[:-1])):
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = up(torch.cat([h, skip], 1))
        h = F.interpolate(h, size=masked_input.shape[-2:], mode="bilinear", align_corners=False)
        return torch.sigmoid(self.out(torch.cat([h, masked_input], 1)))


def random_square_mask(batch: int, H: int, W: int, ratio: float, patch: int, rng: np.random.Generator) -> torch.Tensor:
    """(B, 1, H, W) keep-mask: 0 on a random ``ratio`` of patch x patch squares."""
    gh, gw = math.ceil(H / patch), math.ceil(W / patch)
    n_mask = int(round(ratio * gh * gw))
    keep = np.ones((batch, gh * gw), dtype=np.float32)
    for b in range(batch):
        keep[b, rng.permutation(gh * gw)[:n_mask]] = 0.0
    keep = keep.reshape(batch, 1, gh, gw).repeat(patch, axis=2).repeat(patch, axis=3)[:, :, :H, :W]
    return torch.from_numpy(np.ascontiguousarray(keep))


def _check_finite(loss: torch.Tensor, step: int, history: List[float], what: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{what} diverged at step {step}", {"step": step, "recent_losses": history[-10:]})


def _flat_images(images: np.ndarray) -> np.ndarray:
    return images.reshape(-1, *images.shape[-3:])


def pretrain_recon_prior(images: np.ndarray, cfg: VisualPriorConfig, train: PretrainConfig):
    """Masked-reconstruction pretraining of a prior on ``images[S, Lt, H, W, 3]``.

    Returns (prior, history) where history is the per-step loss list. The
    encoder half becomes the frozen prior; the decoder is discarded.
    """
    cfg = VisualPriorConfig(**{**cfg.to_dict(), "prior_kind": "recon_pretrained", "pretrain_steps": max(train.steps, 0)})
    prior = VisualPrior(cfg)
    if train.steps <= 0:
        return prior, []
    flat = torch.from_numpy(_flat_images(images)).permute(0, 3, 1, 2).contiguous()
    if len(flat) == 0:
        raise ConfigurationError("recon pretraining needs a non-empty train split")
    encoder = prior.encoder
    for p in encoder.parameters():
        p.requires_grad_(True)
    encoder.train()
    decoder = ReconDecoder(cfg.channels)
    init_weights(decoder, cfg.seed, "recon-decoder")
    params = list(encoder.parameters()) + list(decoder.parameters())
    opt = torch.optim.AdamW(params, lr=train.lr, weight_decay=1e-4)
    rng = seed_stream(train.seed, "recon-pretrain")
    history: List[float] = []
    H, W = flat.shape[-2:]
    for step in range(train.steps):
        idx = rng.integers(0, len(flat), size=train.batch_size)
        x = flat[idx]
        keep = random_square_mask(len(idx), H, W, train.mask_ratio, train.mask_patch, rng)
        masked = x * keep
        recon = decoder(encoder(masked), masked)
        loss = F.mse_loss(recon, x)
        _check_finite(loss, step, history, "recon prior pretraining")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if train.log_every and step % train.log_every == 0:
            logger.info("recon prior step %d loss %.5f", step, loss.item())
    prior.aux["decoder"] = decoder
    prior.freeze()
    return prior, history


def recon_rmse(prior: VisualPrior, images: np.ndarray, batch: int = 32) -> float:
    """Unmasked reconstruction RMSE of a recon-pretrained prior's autoencoder."""
    if "decoder" not in prior.aux:
        raise ContractViolation("prior has no reconstruction decoder attached")
    decoder = prior.aux["decoder"]
    flat = torch.from_numpy(_flat_images(images)).permute(0, 3, 1, 2).contiguous()
    se, n = 0.0, 0
    with torch.no_grad():
        for i in range(0, len(flat), batch):
            x = flat[i:i + batch]
            r = decoder(prior.encoder(x), x)
            se += float(((r - x) ** 2).sum())
            n += x.numel()
    return math.sqrt(se / n)


def color_jitter(x: torch.Tensor, strength: float, rng: np.random.Generator) -> torch.Tensor:
    """Per-image, per-channel gain plus a brightness offset."""
    B = x.shape[0]
    gain = torch.from_numpy(rng.uniform(1 - strength, 1 + strength, size=(B, 3, 1, 1)).astype(np.float32))
    bias = torch.from_numpy(rng.uniform(-strength / 2, strength / 2, size=(B, 1, 1, 1)).astype(np.float32))
    return (x * gain + bias).clamp(0, 1)


class ContrastiveHead(nn.Module):
    def __init__(self, c_in: int, dim: int = 32):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(c_in, c_in), nn.SiLU(), nn.Linear(c_in, dim))

    def forward(self, feats: List[torch.Tensor]) -> torch.Tensor:
        return self.net(feats[-1].mean(dim=(2, 3)))


def info_nce(z1: torch.Tensor, z2: torch.Tensor, temperature: float) -> torch.Tensor:
    """Symmetric NT-Xent over a batch of positive pairs (z1[k], z2[k])."""
    z = F.normalize(torch.cat([z1, z2]), dim=1)
    sim = z @ z.T / temperature
    n = z1.shape[0]
    sim = sim.masked_fill(torch.eye(2 * n, dtype=torch.bool), float("-inf"))
    target = torch.cat([torch.arange(n, 2 * n), torch.arange(0, n)])
    return F.cross_entropy(sim, target)


def pretrain_contrastive_prior(images: np.ndarray, cfg: VisualPriorConfig, train: PretrainConfig):
    """Contrastive pretraining where two lightings of one scene (plus color
    jitter) form a positive pair. ``images`` is (S, Lt, H, W, 3); scenes with
    fewer than two lightings are skipped with a warning."""
    if train.temperature <= 0:
        raise ConfigurationError(f"temperature must be positive, got {train.temperature}")
    cfg = VisualPriorConfig(**{**cfg.to_dict(), "prior_kind": "contrastive_pretrained",
                               "pretrain_steps": max(train.steps, 0)})
    prior = VisualPrior(cfg)
    usable = [s for s in range(images.shape[0]) if images.shape[1] >= 2]
    if images.shape[1] < 2:
        logger.warning("every scene has a single lighting; contrastive pretraining skipped")
    head = ContrastiveHead(cfg.channels[-1])
    init_weights(head, cfg.seed, "contrastive-head")
    prior.aux["head"] = head
    if train.steps <= 0 or not usable:
        prior.freeze()
        return prior, []
    data = torch.from_numpy(images).permute(0, 1, 4, 2, 3).contiguous()
    encoder = prior.encoder
    for p in encoder.parameters():
        p.requires_grad_(True)
    encoder.train()
    opt = torch.optim.AdamW(list(encoder.parameters()) + list(head.parameters()), lr=train.lr, weight_decay=1e-4)
    rng = seed_stream(train.seed, "contrastive-pretrain")
    history: List[float] = []
    n_light = images.shape[1]
    bs = min(train.batch_size, len(usable))
    for step in range(train.steps):
        scenes = rng.choice(usable, size=bs, replace=False)
        la = rng.integers(0, n_light, size=bs)
        lb = (la + rng.integers(1, n_light, size=bs)) % n_light
        xa = color_jitter(data[scenes, la], train.jitter, rng)
        xb = color_jitter(data[scenes, lb], train.jitter, rng)
        loss = info_nce(head(encoder(xa)), head(encoder(xb)), train.temperature)
        _check_finite(loss, step, history, "contrastive prior pretraining")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append(loss.item())
        if train.log_every and step % train.log_every == 0:
            logger.info("contrastive prior step %d loss %.5f", step, loss.item())
    prior.freeze()
    return prior, history


def pooled_embedding(prior: VisualPrior, images, batch: int = 64) -> np.ndarray:
    """Global embedding: the contrastive head if present, else the spatial
    mean of the deepest block."""
    x = to_nchw(images)
    outs = []
    head = prior.aux["head"] if "head" in prior.aux else None
    with torch.no_grad():
        for i in range(0, len(x), batch):
            feats = prior.encoder(x[i:i + batch])
            outs.append((head(feats) if head is not None else feats[-1].mean(dim=(2, 3))).numpy())
    return np.concatenate(outs)


def similarity_gap(prior: VisualPrior, images: np.ndarray) -> float:
    """Mean cosine similarity of same-scene pairs minus that of cross-scene
    pairs, over pooled embeddings of ``images[S, Lt, ...]``."""
    S, Lt = images.shape[:2]
    emb = pooled_embedding(prior, _flat_images(images))
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True).clip(1e-12)
    cos = emb @ emb.T
    scene = np.repeat(np.arange(S), Lt)
    same = (scene[:, None] == scene[None, :]) & ~np.eye(S * Lt, dtype=bool)
    cross = scene[:, None] != scene[None, :]
    return float(cos[same].mean() - cos[cross].mean())


def lighting_variance_ratio(prior: VisualPrior, images: np.ndarray, batch: int = 32) -> float:
    """Fraction of hypercolumn variance explained by lighting.

    For each scene the per-pixel, per-channel variance across its lightings is
    averaged, then divided by the total variance of the same features over
    all images, so priors with different feature scales are comparable.
    """
    S, Lt, H, W = images.shape[:4]
    within, total_sum, total_sq, count = 0.0, 0.0, 0.0, 0
    for s in range(S):
        hyper = extract_hypercolumn(prior_features(images[s], prior), (H, W)).double()
        within += float(hyper.var(dim=0, unbiased=False).mean())
        total_sum = total_sum + hyper.sum(dim=(0, 2, 3))
        total_sq = total_sq + (hyper ** 2).sum(dim=(0, 2, 3))
        count += Lt * H * W
    mean = total_sum / count
    total_var = float((total_sq / count - mean ** 2).mean())
    return (within / S) / max(total_var, 1e-12)
