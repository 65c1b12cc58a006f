"""Augmented latent intrinsics: A_i = Proj_i(pool_i(H)) + S_i."""

from __future__ import annotations

from typing import List, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractViolation


class Projection(nn.Module):
    """Per-level 1x1 affine maps from the hypercolumn to the intrinsic widths.

    Level i average-pools the full-resolution hypercolumn by 2^(i+1) (level
    indices are 0-based here) before its linear map. Weights and biases start
    at zero so that a freshly attached projection leaves the intrinsics
    untouched.
    """

    def __init__(self, hyper_channels: int, level_channels: Sequence[int]):
        super().__init__()
        self.hyper_channels = int(hyper_channels)
        self.level_channels = tuple(int(c) for c in level_channels)
        self.maps = nn.ModuleList(nn.Conv2d(self.hyper_channels, c, 1) for c in self.level_channels)
        self.zero_init()

    def zero_init(self) -> None:
        with torch.no_grad():
            for m in self.maps:
                m.weight.zero_()
                m.bias.zero_()

    @property
    def pool_factors(self) -> List[int]:
        return [2 ** (i + 1) for i in range(len(self.maps))]


def pool_hypercolumn(hyper: torch.Tensor, factor: int) -> torch.Tensor:
    return hyper if factor == 1 else F.avg_pool2d(hyper, factor)


def fuse(hyper: torch.Tensor, intrinsics: Sequence[torch.Tensor], proj: Projection) -> List[torch.Tensor]:
    """Add projected, pooled hypercolumn features to each intrinsic level.

    Args:
        hyper: (B, C_H, H, W) hypercolumn at input resolution.
        intrinsics: level tensors (B, C_i, H / 2^i, W / 2^i).
        proj: projection with one map per level.
    """
    if hyper.shape[1] != proj.hyper_channels:
        raise ContractViolation(f"hypercolumn has {hyper.shape[1]} channels, projection expects {proj.hyper_channels}")
    if len(intrinsics) != len(proj.maps):
        raise ContractViolation(f"{len(intrinsics)} intrinsic levels vs {len(proj.maps)} projection maps")
    out = []
    for S, lin, factor in zip(intrinsics, proj.maps, proj.pool_factors):
        if S.shape[1] != lin.out_channels:
            raise ContractViolation(f"level has {S.shape[1]} channels, projection gives {lin.out_channels}")
        pooled = pool_hypercolumn(hyper, factor)
        if pooled.shape[-2:] != S.shape[-2:]:
            raise ContractViolation(f"pooled hypercolumn {tuple(pooled.shape[-2:])} vs level {tuple(S.shape[-2:])}")
        out.append(lin(pooled) + S)
    return out
