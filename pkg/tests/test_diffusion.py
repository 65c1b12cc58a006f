import math

import numpy as np
import pytest
import torch

from ali.diffusion import (DecoderConfig, DiffusionDecoder, add_noise, ddpm_loss, image_to_latent, latent_to_image,
                           make_schedule, sample, sampling_timesteps)
from ali.errors import ConfigurationError, ContractViolation
from ali.numerics import finite_diff_grad, relative_error


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_is_variance_preserving_and_monotone(kind):
    s = make_schedule(100, kind)
    np.testing.assert_allclose(s.alpha ** 2 + s.beta ** 2, 1.0, atol=1e-12)
    assert (np.diff(s.alpha) < 0).all()
    assert s.alpha[-1] < 0.1


def test_cosine_schedule_closed_form():
    T, s = 100, 0.008
    f = lambda t: math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2
    sched = make_schedule(T)
    for t in (1, 10, 50, 90):
        assert sched.alpha[t - 1] ** 2 == pytest.approx(f(t) / f(0), rel=1e-9)
    assert sched.alpha[0] >= 0.999


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ConfigurationError):
        make_schedule(1)
    with pytest.raises(ConfigurationError):
        make_schedule(10, "sigmoid")
    with pytest.raises(ContractViolation):
        make_schedule(10).coeffs(0)


def test_add_noise_per_item_timesteps(rng):
    s = make_schedule(50)
    x0 = torch.as_tensor(rng.normal(size=(3, 2, 4, 4)))
    eps = torch.as_tensor(rng.normal(size=(3, 2, 4, 4)))
    t = torch.tensor([1, 25, 50])
    x_t = add_noise(x0, t, eps, s)
    for b, tb in enumerate(t.tolist()):
        ref = s.alpha[tb - 1] * x0[b] + s.beta[tb - 1] * eps[b]
        np.testing.assert_allclose(x_t[b].numpy(), ref.numpy(), atol=1e-12)
    with pytest.raises(ContractViolation):
        add_noise(x0, 1, eps[:2], s)


def test_latent_roundtrip_of_blockwise_constant_image():
    z = torch.rand(1, 3, 4, 4) * 2 - 1
    img = (z.repeat_interleave(4, -1).repeat_interleave(4, -2) + 1) / 2
    torch.testing.assert_close(image_to_latent(img), z)
    assert latent_to_image(z).shape == (1, 3, 16, 16)


def test_sampling_timesteps():
    assert sampling_timesteps(100, 100) == list(range(100, 0, -1))
    ts = sampling_timesteps(100, 10)
    assert ts[0] == 100 and ts[-1] == 1 and len(ts) == 10 and ts == sorted(ts, reverse=True)
    assert sampling_timesteps(10, 50) == list(range(10, 0, -1))


def tiny_decoder():
    torch.manual_seed(0)
    return DiffusionDecoder(DecoderConfig(width=8, cond_channels=4, emb_dim=16, level_channels=(4, 8, 8),
                                          code_dim=3, latent_factor=4, T=10)).double()


def conds(B, rng, H=32):
    stack = [torch.as_tensor(rng.normal(size=(B, c, H >> (i + 1), H >> (i + 1)))) for i, c in enumerate((4, 8, 8))]
    return stack, torch.as_tensor(rng.normal(size=(B, 3)))


def test_decoder_output_shape(rng):
    dec = tiny_decoder()
    stack, code = conds(2, rng)
    out = dec(torch.zeros(2, 3, 8, 8, dtype=torch.float64), 5, stack, code)
    assert out.shape == (2, 3, 8, 8)
    with pytest.raises(ContractViolation):
        dec(torch.zeros(2, 3, 8, 8, dtype=torch.float64), 5, stack[:2], code)


def test_oracle_decoder_recovers_x0(rng):
    """With the true noise prediction the sampler lands on x0 exactly."""
    s = make_schedule(20)
    x0 = torch.as_tensor(rng.uniform(-0.9, 0.9, size=(2, 3, 4, 4)))

    def oracle(x, t, cond, code):
        a, b = s.coeffs(t)
        return (x - a[:, None, None, None] * x0) / b[:, None, None, None]

    stack, code = conds(2, rng, H=16)
    for steps in (20, 5):
        out = sample(oracle, stack, code, s, steps=steps, seed=3, shape=(3, 4, 4))
        np.testing.assert_allclose(out.numpy(), x0.numpy(), atol=1e-9)


class _Fixed(torch.nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, h):
        return self.value


def test_v_output_is_a_noise_prediction(rng):
    """A body that outputs the true v makes the decoder return the true eps."""
    dec = tiny_decoder()
    s = make_schedule(10)
    stack, code = conds(2, rng)
    x0 = torch.as_tensor(rng.uniform(-1, 1, size=(2, 3, 8, 8)))
    eps = torch.as_tensor(rng.normal(size=(2, 3, 8, 8)))
    t = torch.tensor([1, 9])
    a, b = (c.reshape(2, 1, 1, 1) for c in s.coeffs(t))
    dec.out = _Fixed(a * eps - b * x0)
    torch.testing.assert_close(dec(add_noise(x0, t, eps, s), t, stack, code), eps)


def test_eps_output_and_bad_output_kind(rng):
    cfg = dict(width=8, cond_channels=4, emb_dim=16, level_channels=(4, 8, 8), code_dim=3, T=10)
    dec = DiffusionDecoder(DecoderConfig(**cfg, output="eps")).double()
    stack, code = conds(2, rng)
    dec.out = _Fixed(torch.ones(2, 3, 8, 8, dtype=torch.float64))
    assert torch.equal(dec(torch.zeros(2, 3, 8, 8, dtype=torch.float64), 3, stack, code), dec.out.value)
    with pytest.raises(ConfigurationError):
        DiffusionDecoder(DecoderConfig(**cfg, output="x0"))


def test_lighting_code_reaches_the_output(rng):
    dec = tiny_decoder()
    stack, code = conds(2, rng)
    x = torch.zeros(2, 3, 8, 8, dtype=torch.float64)
    assert not torch.allclose(dec(x, 5, stack, code), dec(x, 5, stack, code + 1))


def test_zero_decoder_loss_is_noise_variance():
    s = make_schedule(10)
    zero = lambda x, t, c, l: torch.zeros_like(x)
    loss = ddpm_loss(zero, torch.zeros(64, 3, 8, 8, dtype=torch.float64), [], torch.zeros(64, 1), s, seed=0)
    assert float(loss) == pytest.approx(1.0, abs=0.02)


def test_ddpm_loss_gradient_matches_finite_differences(rng):
    dec = tiny_decoder()
    s = make_schedule(10)
    stack, code = conds(2, rng)
    x0 = torch.as_tensor(rng.normal(size=(2, 3, 8, 8)))
    w = dec.code_proj.weight
    w0 = w.detach().numpy().copy()

    def f(v):
        with torch.no_grad():
            w.copy_(torch.as_tensor(v))
        return ddpm_loss(dec, x0, stack, code, s, seed=1)

    f(w0)
    dec.zero_grad()
    ddpm_loss(dec, x0, stack, code, s, seed=1).backward()
    assert relative_error(w.grad.numpy(), finite_diff_grad(f, w0)) < 1e-4


def test_sampling_is_deterministic_and_batch_independent(rng):
    dec = tiny_decoder()
    s = make_schedule(10)
    stack, code = conds(3, rng)
    a = sample(dec, stack, code, s, steps=5, seed=[7, 8, 9])
    b = sample(dec, stack, code, s, steps=5, seed=[7, 8, 9])
    assert torch.equal(a, b) and a.shape == (3, 3, 8, 8)
    one = sample(dec, [x[1:2] for x in stack], code[1:2], s, steps=5, seed=[8])
    torch.testing.assert_close(one[0], a[1])
    c = sample(dec, stack, code, s, steps=5, seed=[1, 2, 3])
    assert not torch.equal(a, c)
    assert float(a.abs().max()) <= 1.0
    with pytest.raises(ContractViolation):
        sample(dec, stack, code, s, steps=5, seed=[1, 2])
