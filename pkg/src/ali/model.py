"""The full relighting model as named parameter groups.

Group names follow the training stages: ``theta`` (relighting encoder),
``theta_prime`` (hypercolumn projection), ``phi`` (base decoder),
``phi_prime`` (diffusion decoder) and ``prior`` (frozen visual encoder).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from .diffusion import (DecoderConfig, DiffusionDecoder, NoiseSchedule, image_to_latent, latent_to_image,
                        make_schedule, sample)
from .encoder import (BaseDecoder, EncoderConfig, IntrinsicEncoder, VisualPrior, VisualPriorConfig,
                      extract_hypercolumn, init_weights, prior_features, to_nchw, to_nhwc)
from .errors import ContractViolation, PreconditionError
from .fusion import Projection, fuse
from .numerics import digest

GROUPS = ("theta", "theta_prime", "phi", "phi_prime", "prior")


@dataclass
class ModelConfig:
    image_size: int = 64
    encoder_channels: Tuple[int, ...] = (16, 32, 64)
    code_dim: int = 32
    base_decoder_width: int = 32
    diffusion_width: int = 48
    diffusion_cond_channels: int = 16
    latent_factor: int = 4
    T: int = 100
    schedule: str = "cosine"
    diffusion_output: str = "v"
    diffusion_code_map: int = 8
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "encoder_channels" in d:
            d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def encoder_cfg(self) -> EncoderConfig:
        return EncoderConfig(channels=tuple(self.encoder_channels), code_dim=self.code_dim)

    @property
    def decoder_cfg(self) -> DecoderConfig:
        return DecoderConfig(width=self.diffusion_width, cond_channels=self.diffusion_cond_channels,
                             level_channels=tuple(self.encoder_channels), code_dim=self.code_dim,
                             latent_factor=self.latent_factor, T=self.T,
                             schedule=self.schedule, output=self.diffusion_output, code_map=self.diffusion_code_map)


class ALIModel(nn.Module):
    """Container owning every parameter group.

    ``theta_prime`` and ``prior`` stay empty until a prior is attached for
    Stage 1; until then the augmented intrinsics equal the plain intrinsics.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.theta = IntrinsicEncoder(cfg.encoder_cfg)
        self.phi = BaseDecoder(cfg.encoder_cfg, width=cfg.base_decoder_width)
        self.phi_prime = DiffusionDecoder(cfg.decoder_cfg)
        self.theta_prime: Optional[Projection] = None
        self.prior: Optional[VisualPrior] = None
        init_weights(self.theta, cfg.seed, "theta")
        init_weights(self.phi, cfg.seed, "phi")
        init_weights(self.phi_prime, cfg.seed, "phi_prime")
        self.schedule: NoiseSchedule = make_schedule(cfg.T, cfg.schedule)
        self.stage = -1  # last completed stage

    # -- parameter groups -------------------------------------------------

    def attach_prior(self, prior: VisualPrior) -> None:
        self.prior = prior.freeze()
        self.theta_prime = Projection(prior.cfg.hyper_channels, self.cfg.encoder_channels)

    def group(self, name: str) -> Optional[nn.Module]:
        if name not in GROUPS:
            raise KeyError(name)
        return getattr(self, name)

    def group_state(self, name: str) -> Dict[str, torch.Tensor]:
        mod = self.group(name)
        if mod is None:
            return {}
        if name == "prior":
            return dict(mod.encoder.state_dict())
        return dict(mod.state_dict())

    def group_digests(self) -> Dict[str, str]:
        return {g: digest(self.group_state(g)) for g in GROUPS}

    def group_parameters(self, name: str) -> List[nn.Parameter]:
        mod = self.group(name)
        if mod is None:
            return []
        return list(mod.encoder.parameters()) if name == "prior" else list(mod.parameters())

    def set_trainable(self, trainable) -> None:
        trainable = set(trainable)
        for g in GROUPS:
            for p in self.group_parameters(g):
                p.requires_grad_(g in trainable and g != "prior")
        if self.prior is not None:
            self.prior.freeze()

    # -- forward paths ----------------------------------------------------

    def hypercolumn(self, x: torch.Tensor) -> torch.Tensor:
        return extract_hypercolumn(prior_features(x, self.prior), tuple(x.shape[-2:]))

    def encode(self, x: torch.Tensor):
        """(B, 3, H, W) -> (ALI levels, lighting code)."""
        stack, code = self.theta(x)
        if self.prior is not None and self.theta_prime is not None:
            stack = fuse(self.hypercolumn(x), stack, self.theta_prime)
        return stack, code

    def base_relight(self, content: torch.Tensor, lighting: torch.Tensor) -> torch.Tensor:
        stack, _ = self.encode(content)
        _, code = self.encode(lighting)
        return self.phi(stack, code)

    def sample_latent(self, stack, code, steps: int, seed) -> torch.Tensor:
        return sample(self.phi_prime, stack, code, self.schedule, steps=steps, seed=seed)

    def diffusion_relight(self, content: torch.Tensor, code: torch.Tensor, steps: int, seed) -> torch.Tensor:
        stack, _ = self.encode(content)
        z = self.sample_latent(stack, code, steps, seed)
        return latent_to_image(z, self.cfg.latent_factor)

    def latent(self, x: torch.Tensor) -> torch.Tensor:
        return image_to_latent(x, self.cfg.latent_factor)

    def require_stage(self, stage: int) -> None:
        if self.stage < stage:
            raise PreconditionError(f"checkpoint has completed stage {self.stage}, need stage >= {stage}")
