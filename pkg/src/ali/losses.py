"""Training objectives: coding-rate regularizer, improved intrinsics loss,
relight reconstruction and the Stage-1 composite."""

from __future__ import annotations

from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .errors import ConfigurationError, ContractViolation
from .numerics import derive_seed, torch_generator


def _as_tensor(A) -> torch.Tensor:
    if isinstance(A, torch.Tensor):
        return A
    return torch.as_tensor(np.asarray(A, dtype=np.float64))


def coding_rate(A, lam: float = 1.0) -> torch.Tensor:
    """log det(I + d/(n lam^2) A^T A) for ``A`` of shape (..., n, d).

    Uses the smaller of the two Gram matrices (Sylvester's determinant
    identity) and a Cholesky factorization, which is always defined because
    the matrix is the identity plus a PSD term.
    """
    A = _as_tensor(A)
    if lam <= 0:
        raise ConfigurationError(f"lambda must be positive, got {lam}")
    if A.ndim < 2:
        raise ContractViolation(f"coding_rate expects (..., n, d), got shape {tuple(A.shape)}")
    if not torch.isfinite(A).all():
        raise ContractViolation("coding_rate input has non-finite entries")
    n, d = A.shape[-2], A.shape[-1]
    scale = d / (n * lam * lam)
    G = A.transpose(-1, -2) @ A if d <= n else A @ A.transpose(-1, -2)
    k = G.shape[-1]
    M = torch.eye(k, dtype=A.dtype, device=A.device) + scale * G
    L = torch.linalg.cholesky(M)
    return 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)


def sample_hypersphere(n: int, d: int, seed: int, dtype=torch.float64) -> torch.Tensor:
    """``n`` independent uniform samples on the unit (d-1)-sphere."""
    if n < 1 or d < 1:
        raise ConfigurationError(f"need n, d >= 1, got n={n}, d={d}")
    g = torch_generator(seed, "hypersphere", n, d)
    z = torch.randn(n, d, generator=g, dtype=torch.float64)
    # a zero row has probability zero; redraw-free guard keeps the contract
    z[z.norm(dim=1) == 0] = 1.0
    return (z / z.norm(dim=1, keepdim=True)).to(dtype)


def normalize_rows(A: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    norm = torch.sqrt((A * A).sum(-1, keepdim=True) + eps * eps)
    return A / norm


def feature_rows(feature_map: torch.Tensor) -> torch.Tensor:
    """(B, C, h, w) -> (B, h*w, C): one row per spatial location."""
    B, C = feature_map.shape[:2]
    return feature_map.reshape(B, C, -1).transpose(1, 2)


def reg_loss(A, lam: float = 1.0, seed: int = 0) -> torch.Tensor:
    """(R(A) - R(A_hat))^2 with A_hat drawn uniformly on the sphere.

    ``A`` is (n, d) or batched (B, n, d); rows are L2-normalized before the
    coding rate so both arguments live on the same sphere. Batched input
    returns the mean over the batch, with one shared A_hat.
    """
    A = _as_tensor(A)
    n, d = A.shape[-2], A.shape[-1]
    A_hat = sample_hypersphere(n, d, seed, dtype=A.dtype)
    r_hat = coding_rate(A_hat, lam)
    r = coding_rate(normalize_rows(A), lam)
    return ((r - r_hat) ** 2).mean()


def improved_intrinsics_loss(stacks) -> torch.Tensor:
    """Sum over levels and lightings of ||A_m - mean_m' A_m'||_2 for one scene.

    ``stacks`` is a list of M stacks (each a list of level tensors), or, in
    batched form, a list of level tensors shaped (G, M, ...) for G scenes; the
    batched form returns the mean over scenes.
    """
    if len(stacks) == 0:
        raise ContractViolation("need at least one stack")
    if isinstance(stacks[0], torch.Tensor):
        levels = list(stacks)
        batched = True
    else:
        M = len(stacks)
        n_levels = len(stacks[0])
        if any(len(s) != n_levels for s in stacks):
            raise ContractViolation("stacks have different numbers of levels")
        levels = []
        for i in range(n_levels):
            shapes = {tuple(_as_tensor(s[i]).shape) for s in stacks}
            if len(shapes) != 1:
                raise ContractViolation(f"level {i} shapes differ across lightings: {shapes}")
            levels.append(torch.stack([_as_tensor(s[i]) for s in stacks])[None])
        batched = False
    total = 0.0
    for lvl in levels:
        G, M = lvl.shape[:2]
        dev = (lvl - lvl.mean(dim=1, keepdim=True)).reshape(G, M, -1)
        sq = (dev * dev).sum(-1)
        # sqrt with a zero-safe gradient: identical stacks give loss 0 and grad 0
        safe = torch.where(sq > 0, sq, torch.ones_like(sq))
        norms = torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq))
        total = total + norms.sum(1).mean() if batched else total + norms.sum()
    return total if isinstance(total, torch.Tensor) else torch.zeros(())


def relight_recon_loss(pred, target) -> torch.Tensor:
    """Mean absolute per-pixel error."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ContractViolation(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    return (pred - target).abs().mean()


LOSS_TERMS = ("relight", "intrinsics", "reg_A", "reg_L")


def stage1_total(pred, target, ali_levels: Sequence[torch.Tensor], lighting_codes, lam: float = 1.0,
                 seed: int = 0, weights: Optional[Mapping[str, float]] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Composite objective: relight + improved intrinsics + sum_i reg(A_i) + reg(L).

    Args:
        pred, target: relit images, any matching shape.
        ali_levels: per-level tensors shaped (G, M, C, h, w): G scenes with M
            lightings each.
        lighting_codes: (B, d_L) codes, treated as one n x d matrix.
        lam: coding-rate temperature.
        seed: per-step seed for the hyperspherical samples.
        weights: optional per-term multipliers; the default is the plain sum.

    Returns:
        (total, breakdown) where breakdown holds float values of each term and
        ``total``.
    """
    w = {k: 1.0 for k in LOSS_TERMS}
    if weights:
        w.update(weights)
    terms = {
        "relight": relight_recon_loss(pred, target),
        "intrinsics": improved_intrinsics_loss(list(ali_levels)),
    }
    reg_a = 0.0
    for i, lvl in enumerate(ali_levels):
        flat = lvl.reshape(-1, *lvl.shape[2:])
        reg_a = reg_a + reg_loss(feature_rows(flat), lam, derive_seed(seed, "reg_A", i))
    terms["reg_A"] = reg_a
    terms["reg_L"] = reg_loss(_as_tensor(lighting_codes), lam, derive_seed(seed, "reg_L"))
    weighted = {k: w[k] * terms[k] for k in LOSS_TERMS}
    total = sum(weighted.values())
    breakdown = {k: float(torch.as_tensor(weighted[k]).detach()) for k in LOSS_TERMS}
    breakdown["total"] = float(total.detach())
    return total, breakdown
