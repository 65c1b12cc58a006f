import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ali.errors import ContractViolation
from ali.fusion import Projection, fuse
from ali.numerics import finite_diff_grad, relative_error


def stack(rng, B=2, chans=(4, 6, 8), H=32):
    return [torch.as_tensor(rng.normal(size=(B, c, H >> (i + 1), H >> (i + 1)))) for i, c in enumerate(chans)]


def test_zero_projection_is_identity(rng):
    S = stack(rng)
    hyper = torch.as_tensor(rng.normal(size=(2, 5, 32, 32)))
    proj = Projection(5, (4, 6, 8)).double()
    for a, s in zip(fuse(hyper, S, proj), S):
        assert torch.equal(a, s)


def test_identity_projection_gives_pooled_hypercolumn(rng):
    C = 4
    proj = Projection(C, (C, C, C)).double()
    with torch.no_grad():
        for m in proj.maps:
            m.weight.copy_(torch.eye(C).reshape(C, C, 1, 1))
    hyper = torch.as_tensor(rng.normal(size=(1, C, 32, 32)))
    zeros = [torch.zeros(1, C, 32 >> (i + 1), 32 >> (i + 1), dtype=torch.float64) for i in range(3)]
    for i, a in enumerate(fuse(hyper, zeros, proj)):
        k = 2 ** (i + 1)
        ref = hyper.numpy().reshape(1, C, 32 // k, k, 32 // k, k).mean(axis=(3, 5))
        np.testing.assert_allclose(a.detach().numpy(), ref, atol=1e-12)


def test_shapes_and_mismatches(rng):
    S = stack(rng)
    proj = Projection(5, (4, 6, 8)).double()
    torch.nn.init.normal_(proj.maps[0].weight)
    out = fuse(torch.as_tensor(rng.normal(size=(2, 5, 32, 32))), S, proj)
    assert [a.shape for a in out] == [s.shape for s in S]
    with pytest.raises(ContractViolation):
        fuse(torch.zeros(2, 3, 32, 32, dtype=torch.float64), S, proj)
    with pytest.raises(ContractViolation):
        fuse(torch.zeros(2, 5, 32, 32, dtype=torch.float64), S[:2], proj)
    with pytest.raises(ContractViolation):
        fuse(torch.zeros(2, 5, 16, 16, dtype=torch.float64), S, proj)


def test_linear_in_hypercolumn(rng):
    S = stack(rng)
    proj = Projection(5, (4, 6, 8)).double()
    with torch.no_grad():
        for m in proj.maps:
            m.weight.normal_()
    h1, h2 = (torch.as_tensor(rng.normal(size=(2, 5, 32, 32))) for _ in range(2))
    a, b = 0.7, -1.3
    lhs = [x - s for x, s in zip(fuse(a * h1 + b * h2, S, proj), S)]
    r1 = [x - s for x, s in zip(fuse(h1, S, proj), S)]
    r2 = [x - s for x, s in zip(fuse(h2, S, proj), S)]
    for l, x, y in zip(lhs, r1, r2):
        np.testing.assert_allclose(l.detach().numpy(), (a * x + b * y).detach().numpy(), atol=1e-10)


def test_projection_weight_gradient(rng):
    S = stack(rng, B=1, chans=(2, 3, 2), H=16)
    hyper = torch.as_tensor(rng.normal(size=(1, 3, 16, 16)))
    proj = Projection(3, (2, 3, 2)).double()
    target = [torch.as_tensor(rng.normal(size=s.shape)) for s in S]
    w0 = rng.normal(size=proj.maps[1].weight.shape)

    def f(w):
        with torch.no_grad():
            proj.maps[1].weight.copy_(torch.as_tensor(w))
        return sum(((a - t) ** 2).sum() for a, t in zip(fuse(hyper, S, proj), target))

    f(w0)
    proj.zero_grad()
    loss = sum(((a - t) ** 2).sum() for a, t in zip(fuse(hyper, S, proj), target))
    loss.backward()
    analytic = proj.maps[1].weight.grad.numpy().copy()
    assert relative_error(analytic, finite_diff_grad(f, w0)) < 1e-4
