"""Deterministic RNG streams, digests, stable log-determinants and a
finite-difference gradient checker.

Every random draw in the package goes through :func:`seed_stream` or
:func:`torch_generator`, keyed by an integer seed plus a tuple of names, so no
module ever touches global or ambient entropy.
"""

from __future__ import annotations

import hashlib
import zlib
from typing import Callable, Mapping, Union

import numpy as np
import torch

from .errors import ContractViolation, OracleError

ArrayLike = Union[np.ndarray, torch.Tensor]


def _name_key(names) -> tuple[int, ...]:
    return tuple(zlib.crc32(str(n).encode("utf-8")) for n in names)


def derive_seed(seed: int, *names) -> int:
    """Derive a 63-bit child seed from ``seed`` and a path of names."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_name_key(names))
    return int(ss.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)


def seed_stream(seed: int, *names) -> np.random.Generator:
    """Named numpy stream. Same (seed, names) always yields the same draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=_name_key(names))))


def torch_generator(seed: int, *names) -> torch.Generator:
    g = torch.Generator(device="cpu")
    g.manual_seed(derive_seed(seed, *names))
    return g


def _canonical_bytes(value) -> bytes:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().contiguous().numpy()
    arr = np.ascontiguousarray(np.asarray(value))
    if arr.dtype.byteorder == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
    header = f"{arr.dtype.str}|{','.join(str(s) for s in arr.shape)}|".encode()
    return header + arr.tobytes()


def digest(params) -> str:
    """SHA-256 hex digest of a tensor, array, or name -> tensor mapping.

    Names are visited in sorted order and each entry hashes its dtype, shape
    and raw little-endian bytes, so the result is stable across processes.
    """
    h = hashlib.sha256()
    if isinstance(params, Mapping):
        for name in sorted(params):
            h.update(name.encode("utf-8") + b"\0")
            h.update(_canonical_bytes(params[name]))
    else:
        h.update(_canonical_bytes(params))
    return h.hexdigest()


def stable_logdet_psd(M: ArrayLike, asym_tol: float = 1e-10, psd_tol: float = 1e-10):
    """log det of a symmetric positive semi-definite matrix.

    Tries a Cholesky factorization first (differentiable, exact for PD input);
    singular matrices fall back to an eigendecomposition with eigenvalues
    clamped at zero, which gives ``-inf`` for rank-deficient input. Returns a
    float for numpy input and a 0-d tensor for torch input.
    """
    is_numpy = not isinstance(M, torch.Tensor)
    T = torch.as_tensor(np.asarray(M)) if is_numpy else M
    if T.ndim != 2 or T.shape[0] != T.shape[1]:
        raise ContractViolation(f"expected a square matrix, got shape {tuple(T.shape)}")
    if not torch.isfinite(T).all():
        raise ContractViolation("matrix has non-finite entries")
    scale = max(1.0, float(T.detach().abs().max()))
    if float((T - T.T).detach().abs().max()) > asym_tol * scale:
        raise ContractViolation("matrix is not symmetric")
    T = 0.5 * (T + T.T)
    L, info = torch.linalg.cholesky_ex(T)
    if int(info) == 0:
        out = 2.0 * torch.log(torch.diagonal(L)).sum()
    else:
        evals = torch.linalg.eigvalsh(T)
        if float(evals.min()) < -psd_tol * scale:
            raise ContractViolation(f"matrix is indefinite (min eigenvalue {float(evals.min()):.3e})")
        out = torch.log(evals.clamp_min(0.0)).sum()
    return float(out) if is_numpy else out


def finite_diff_grad(f: Callable[[torch.Tensor], float], x: ArrayLike, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one element at a time.

    Test-only oracle; cost is ``2 * x.size`` evaluations of ``f``.
    """
    if not h > 0:
        raise ContractViolation(f"step h must be positive, got {h}")
    base = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x.detach()).to(torch.float64).clone()
    flat = base.reshape(-1)
    grad = np.empty(flat.numel(), dtype=np.float64)
    def value(v):
        with torch.no_grad():
            return float(f(v))

    for i in range(flat.numel()):
        orig = float(flat[i])
        flat[i] = orig + h
        fp = value(base)
        flat[i] = orig - h
        fm = value(base)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"f is non-finite at element {i} (+h: {fp}, -h: {fm})")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(tuple(base.shape))


def relative_error(a, b, floor: float = 1e-8) -> float:
    """max |a - b| / max(|b|_max, floor); the metric used by gradient checks."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), floor))
