"""Cross-image relighting and lighting-code interpolation with a trained
checkpoint.

Images are (H, W, 3) arrays or (B, 3, H, W) tensors in [0, 1]; outputs use
the same layout as the content input.
"""

from __future__ import annotations

import math
import warnings
from pathlib import Path
from typing import List, Sequence

import numpy as np
import torch

from .datagen import save_png
from .encoder import to_nchw, to_nhwc
from .errors import ContractViolation, PreconditionError
from .numerics import derive_seed

ANTIPODAL_TOL = 1e-6


def _model(ckpt):
    model = getattr(ckpt, "model", ckpt)
    if model.stage < 2:
        raise PreconditionError(f"relighting needs a checkpoint trained through stage 2, got stage {model.stage}")
    return model


def _to_batch(image):
    hwc = not isinstance(image, torch.Tensor) or image.ndim == 3 and image.shape[-1] == 3
    x = to_nchw(image).float()
    return x, hwc


def _from_batch(x: torch.Tensor, hwc: bool):
    return to_nhwc(x)[0] if hwc and x.shape[0] == 1 else (to_nhwc(x) if hwc else x)


@torch.no_grad()
def lighting_code(image, ckpt) -> torch.Tensor:
    """(B, d_L) lighting codes of ``image``."""
    model = getattr(ckpt, "model", ckpt)
    x, _ = _to_batch(image)
    return model.encode(x)[1]


@torch.no_grad()
def relight_with_code(content, code, ckpt, steps: int = 50, seed: int = 0):
    """Render ``content`` under a raw lighting code (d_L,) or (B, d_L)."""
    model = _model(ckpt)
    x, hwc = _to_batch(content)
    code = torch.as_tensor(code, dtype=x.dtype)
    if code.ndim == 1:
        code = code[None].expand(x.shape[0], -1)
    if code.shape != (x.shape[0], model.cfg.code_dim):
        raise ContractViolation(f"code shape {tuple(code.shape)} does not fit batch {x.shape[0]} "
                                f"with d_L={model.cfg.code_dim}")
    seeds = [derive_seed(seed, "item", b) for b in range(x.shape[0])]
    y = model.diffusion_relight(x, code, steps, seeds).clamp(0, 1)
    return _from_batch(y, hwc)


@torch.no_grad()
def relight(content, lighting_src, ckpt, steps: int = 50, seed: int = 0):
    """Intrinsics from ``content``, lighting code from ``lighting_src``."""
    _model(ckpt)
    return relight_with_code(content, lighting_code(lighting_src, ckpt), ckpt, steps, seed)


def slerp(a: torch.Tensor, b: torch.Tensor, t: float) -> torch.Tensor:
    """Spherical interpolation between raw (unnormalized) vectors; the norm
    follows the same great-circle weights. Falls back to linear interpolation
    with a warning when the vectors are antipodal, and silently when they are
    parallel (where both rules coincide)."""
    a64, b64 = a.double(), b.double()
    na, nb = a64.norm(), b64.norm()
    if na == 0 or nb == 0:
        return ((1 - t) * a64 + t * b64).to(a.dtype)
    cos = float(torch.clamp((a64 @ b64) / (na * nb), -1.0, 1.0))
    theta = math.acos(cos)
    if abs(theta - math.pi) < ANTIPODAL_TOL:
        warnings.warn("antipodal lighting codes; interpolating linearly", RuntimeWarning)
        return ((1 - t) * a64 + t * b64).to(a.dtype)
    if theta < ANTIPODAL_TOL:
        return ((1 - t) * a64 + t * b64).to(a.dtype)
    s = math.sin(theta)
    return (math.sin((1 - t) * theta) / s * a64 + math.sin(t * theta) / s * b64).to(a.dtype)


def interpolation_codes(code_a: torch.Tensor, code_b: torch.Tensor, n_steps: int) -> List[torch.Tensor]:
    """Codes at fractions k / (n_steps - 1); endpoints are the inputs exactly."""
    if n_steps < 2:
        raise ContractViolation(f"n_steps must be >= 2, got {n_steps}")
    codes = [code_a]
    for k in range(1, n_steps - 1):
        codes.append(slerp(code_a, code_b, k / (n_steps - 1)))
    codes.append(code_b)
    return codes


@torch.no_grad()
def interpolate_lighting(content, light_a, light_b, n_steps: int, ckpt, steps: int = 50, seed: int = 0) -> list:
    """Frames of ``content`` swept from the lighting of ``light_a`` to that
    of ``light_b``; every frame uses the same sampling seed and is rendered on
    its own so frame 0 and the last frame equal the plain relights exactly."""
    _model(ckpt)
    if n_steps < 2:
        raise ContractViolation(f"n_steps must be >= 2, got {n_steps}")
    ca = lighting_code(light_a, ckpt)[0]
    cb = lighting_code(light_b, ckpt)[0]
    return [relight_with_code(content, c, ckpt, steps, seed) for c in interpolation_codes(ca, cb, n_steps)]


def contact_sheet(frames: Sequence[np.ndarray], cols: int = 0, pad: int = 2) -> np.ndarray:
    """Tile (H, W, 3) frames into one image on a white background."""
    if not frames:
        raise ContractViolation("no frames for a contact sheet")
    H, W = frames[0].shape[:2]
    cols = cols or len(frames)
    rows = math.ceil(len(frames) / cols)
    sheet = np.ones((rows * H + (rows + 1) * pad, cols * W + (cols + 1) * pad, 3), dtype=np.float32)
    for i, f in enumerate(frames):
        r, c = divmod(i, cols)
        y, x = pad + r * (H + pad), pad + c * (W + pad)
        sheet[y:y + H, x:x + W] = f
    return sheet


def save_frames(frames: Sequence[np.ndarray], out_dir, prefix: str = "frame") -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, f in enumerate(frames):
        p = out_dir / f"{prefix}_{i:03d}.png"
        save_png(p, f)
        paths.append(p)
    p = out_dir / f"{prefix}_sheet.png"
    save_png(p, contact_sheet(frames))
    paths.append(p)
    return paths
