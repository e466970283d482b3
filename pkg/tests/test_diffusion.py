import math

import numpy as np
import pytest
import torch

from wxdiff.codec import encode, to_signed
from wxdiff.diffusion import (
    Denoiser,
    DenoiseInput,
    DivergenceError,
    NoiseSchedule,
    add_noise,
    loss_removal,
    loss_removal_torch,
    loss_synthesis,
    loss_synthesis_torch,
    precondition_coeffs,
    sample,
)
from wxdiff.codec import make_condition_map
from wxdiff.procsim import SceneSpec, apply_effect, render_clear
from wxdiff.types import LatentTensor, SamplePair, VideoTensor, WeatherStrength

SCHED = NoiseSchedule()


class OracleDenoiser(Denoiser):
    """D == z* regardless of input; exercises the sampler contract."""

    def __init__(self, target: torch.Tensor, schedule=SCHED):
        super().__init__(net=None, schedule=schedule)
        self.target = target

    def denoise_torch(self, noisy, cond_video, cond_map, sigma):
        return self.target.expand_as(noisy)


class ZeroNet(torch.nn.Module):
    def forward(self, x, c_noise):
        C = (x.shape[1] - 6) // 2
        return torch.zeros_like(x[:, :C])


# --- schedule and preconditioning ----------------------------------------------

def test_precondition_values_at_sigma_data():
    c = precondition_coeffs(0.5, sigma_data=0.5)
    assert c.c_skip == pytest.approx(0.5, abs=1e-4)
    assert c.c_out == pytest.approx(0.35355, abs=1e-4)
    assert c.c_in == pytest.approx(1.41421, abs=1e-4)
    assert c.c_noise == pytest.approx(-0.17329, abs=1e-4)
    assert c.lam == pytest.approx(8.0, abs=1e-4)


def test_precondition_limits():
    c = precondition_coeffs(1e-6)
    assert c.c_skip == pytest.approx(1.0, abs=1e-6)
    assert c.c_out == pytest.approx(0.0, abs=1e-5)


def test_precondition_identity_random_sigma(rng):
    sig = np.exp(rng.uniform(np.log(1e-3), np.log(100), 100))
    c = precondition_coeffs(sig)
    assert np.max(np.abs(c.c_in ** 2 * (sig ** 2 + 0.25) - 1.0)) <= 1e-9
    c37 = precondition_coeffs(3.7)
    assert c37.c_in ** 2 * (3.7 ** 2 + 0.25) == pytest.approx(1.0, abs=1e-12)


def test_precondition_rejects_nonpositive():
    with pytest.raises(ValueError):
        precondition_coeffs(0.0)


def test_sigma_grid_endpoints():
    grid = SCHED.sigma_grid(30)
    assert grid[0] == pytest.approx(80.0, rel=1e-12)
    assert grid[-1] == pytest.approx(0.002, rel=1e-12)
    assert np.all(np.diff(grid) < 0)
    assert SCHED.sigma_grid(1).tolist() == [80.0]


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(ValueError):
        NoiseSchedule(rho=0.5)


# --- add_noise -------------------------------------------------------------------

def test_add_noise_zero_sigma(rng):
    z = LatentTensor(code=rng.normal(size=(2, 4, 4, 12)).astype(np.float32), codec_id="t")
    out = add_noise(z, 0.0, np.zeros_like(z.code))
    assert np.array_equal(out.code, z.code)


def test_add_noise_constant_field():
    z = LatentTensor(code=np.zeros((1, 2, 2, 12), dtype=np.float32), codec_id="t")
    out = add_noise(z, 2.0, np.ones_like(z.code))
    assert np.all(out.code == 2.0)


def test_add_noise_rejects_negative(rng):
    z = LatentTensor(code=np.zeros((1, 2, 2, 3), dtype=np.float32), codec_id="t")
    with pytest.raises(ValueError):
        add_noise(z, -0.1, np.zeros_like(z.code))


def test_add_noise_variance(rng):
    z = LatentTensor(code=np.zeros((8, 16, 16, 12), dtype=np.float32), codec_id="t")
    sigma = 1.7
    eps = rng.standard_normal(z.code.shape)
    out = add_noise(z, sigma, eps)
    assert np.var(out.code - z.code) == pytest.approx(sigma ** 2, rel=0.05)


# --- denoise contract -------------------------------------------------------------

def test_denoise_zero_net_is_skip_path(rng):
    d = Denoiser(ZeroNet(), SCHED)
    noisy = torch.randn(1, 12, 2, 4, 4)
    cond = torch.randn(1, 12, 2, 4, 4)
    cmap = torch.rand(1, 6, 2, 4, 4)
    sigma = torch.full((1,), 0.9)
    out = d.denoise_torch(noisy, cond, cmap, sigma)
    c = precondition_coeffs(0.9, 0.5)
    assert torch.allclose(out, c.c_skip * noisy, atol=1e-6)


def test_denoise_shape_propagation(rng):
    d = Denoiser(ZeroNet(), SCHED)
    noisy = LatentTensor(code=rng.normal(size=(8, 16, 16, 12)).astype(np.float32), codec_id="t")
    cond = LatentTensor(code=rng.normal(size=(8, 16, 16, 12)).astype(np.float32), codec_id="t")
    cmap = make_condition_map(WeatherStrength(fog=0.5), 8, 16, 16)
    out = d.denoise(DenoiseInput(noisy=noisy, cond_video=cond, cond_map=cmap, sigma=1.0))
    assert out.code.shape == (8, 16, 16, 12)


def test_denoise_input_validation(rng):
    noisy = LatentTensor(code=np.zeros((2, 4, 4, 12), np.float32), codec_id="t")
    cond_bad = LatentTensor(code=np.zeros((2, 4, 8, 12), np.float32), codec_id="t")
    cmap = make_condition_map(WeatherStrength(), 2, 4, 4)
    with pytest.raises(ValueError, match="disagree"):
        DenoiseInput(noisy=noisy, cond_video=cond_bad, cond_map=cmap, sigma=1.0)


# --- losses -----------------------------------------------------------------------

@pytest.fixture(scope="module")
def toy_pair():
    spec = SceneSpec(seed=5, H=16, W=16, L=2)
    clear, meta = render_clear(spec)
    weather = apply_effect(clear, meta, "fog", 0.6, seed=5)
    return SamplePair(clear=clear, weather=weather, strengths=WeatherStrength(fog=0.6),
                      source="simulation", meta=meta, sample_id="toy")


class ConstOffsetDenoiser(Denoiser):
    """D == target + offset; for the loss identity lambda * c^2."""

    def __init__(self, target, offset):
        super().__init__(net=None, schedule=SCHED)
        self.target = target
        self.offset = offset

    def denoise_torch(self, noisy, cond_video, cond_map, sigma):
        return self.target + self.offset


def _pair_tensors(pair):
    zc = encode(to_signed(pair.clear), 2)
    zw = encode(to_signed(pair.weather), 2)
    from wxdiff.diffusion import _to_torch
    cmap = make_condition_map(pair.strengths, zc.l, zc.h, zc.w)
    return _to_torch(zc.code, "cpu"), _to_torch(zw.code, "cpu"), _to_torch(cmap.map, "cpu")


def test_loss_zero_for_oracle(toy_pair):
    zc, zw, cmap = _pair_tensors(toy_pair)
    sigma = torch.full((1,), 0.7)
    eps = torch.randn(zw.shape, generator=torch.Generator().manual_seed(0))
    syn = loss_synthesis_torch(ConstOffsetDenoiser(zw, 0.0), zc, zw, cmap, sigma, eps)
    rem = loss_removal_torch(ConstOffsetDenoiser(zc, 0.0), zc, zw, cmap, sigma, eps)
    assert float(syn) == 0.0
    assert float(rem) == 0.0


def test_loss_constant_offset_identity(toy_pair):
    zc, zw, cmap = _pair_tensors(toy_pair)
    c = 0.31
    for sigma_v in (0.2, 0.7, 3.0):
        sigma = torch.full((1,), sigma_v)
        eps = torch.zeros_like(zw)
        loss = loss_synthesis_torch(ConstOffsetDenoiser(zw, c), zc, zw, cmap, sigma, eps)
        lam = precondition_coeffs(sigma_v, 0.5).lam
        assert float(loss) == pytest.approx(lam * c * c, rel=1e-5)


def test_loss_removal_is_swapped_synthesis(toy_pair):
    # loss_removal(pair) == loss_synthesis(pair with clear & weather swapped)
    sigma, eps_seed = 0.9, 7
    eps = np.random.default_rng(eps_seed).standard_normal((2, 8, 8, 12)).astype(np.float32)
    swapped = SamplePair(clear=toy_pair.weather, weather=toy_pair.clear,
                         strengths=toy_pair.strengths, source="simulation",
                         sample_id="swapped")
    from wxdiff.net import NetConfig, init_net
    net = init_net(NetConfig(), seed=3)
    d = Denoiser(net, SCHED)
    a = loss_removal(d, toy_pair, sigma, eps)
    b = loss_synthesis(d, swapped, sigma, eps)
    assert a == pytest.approx(b, rel=1e-6)


class TinyNet(torch.nn.Module):
    """< 100 parameters; enough structure for a real gradient check."""

    def __init__(self, c_in=30, c_out=12):
        super().__init__()
        self.w1 = torch.nn.Conv3d(c_in, 2, 1)
        self.w2 = torch.nn.Conv3d(2, c_out, 1)

    def forward(self, x, c_noise):
        return self.w2(torch.tanh(self.w1(x) + c_noise.reshape(-1, 1, 1, 1, 1)))


@pytest.mark.parametrize("loss_name", ["synthesis", "removal"])
def test_gradients_match_finite_differences(toy_pair, loss_name):
    torch.manual_seed(11)
    net = TinyNet().double()
    assert sum(p.numel() for p in net.parameters()) <= 100
    d = Denoiser(net, SCHED)
    zc, zw, cmap = _pair_tensors(toy_pair)
    zc, zw, cmap = zc.double(), zw.double(), cmap.double()
    sigma = torch.full((1,), 0.8, dtype=torch.float64)
    eps = torch.randn(zw.shape, generator=torch.Generator().manual_seed(4)).double()
    fn = loss_synthesis_torch if loss_name == "synthesis" else loss_removal_torch

    loss = fn(d, zc, zw, cmap, sigma, eps)
    loss.backward()

    h = 1e-5
    for p in net.parameters():
        grad = p.grad.clone()
        flat = p.data.view(-1)
        for idx in range(0, flat.numel(), max(1, flat.numel() // 5)):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + h
                up = float(fn(d, zc, zw, cmap, sigma, eps))
                flat[idx] = orig - h
                dn = float(fn(d, zc, zw, cmap, sigma, eps))
                flat[idx] = orig
            fd = (up - dn) / (2 * h)
            g = float(grad.view(-1)[idx])
            assert g == pytest.approx(fd, rel=1e-3, abs=1e-7)


# --- sampler ---------------------------------------------------------------------

@pytest.mark.parametrize("steps", [1, 5, 30])
def test_exact_denoiser_recovery(steps, rng):
    target_np = rng.normal(size=(2, 4, 4, 12)).astype(np.float32)
    target = torch.from_numpy(target_np).permute(3, 0, 1, 2).unsqueeze(0)
    d = OracleDenoiser(target)
    cond = LatentTensor(code=np.zeros_like(target_np), codec_id="s2d:f=2")
    out = sample(d, cond, WeatherStrength(), steps=steps, seed=9)
    assert np.max(np.abs(out.code - target_np)) <= 1e-4


def test_sampler_determinism(rng):
    target_np = rng.normal(size=(1, 4, 4, 12)).astype(np.float32)
    target = torch.from_numpy(target_np).permute(3, 0, 1, 2).unsqueeze(0)
    d = OracleDenoiser(target)
    cond = LatentTensor(code=np.zeros_like(target_np), codec_id="s2d:f=2")
    a = sample(d, cond, WeatherStrength(fog=1.0), steps=7, seed=123)
    b = sample(d, cond, WeatherStrength(fog=1.0), steps=7, seed=123)
    assert a.code.tobytes() == b.code.tobytes()


def test_sampler_divergence_error():
    class NanDenoiser(Denoiser):
        def __init__(self):
            super().__init__(net=None, schedule=SCHED)

        def denoise_torch(self, noisy, cond_video, cond_map, sigma):
            return noisy * float("nan")

    cond = LatentTensor(code=np.zeros((1, 4, 4, 12), np.float32), codec_id="t")
    with pytest.raises(DivergenceError, match="step 0"):
        sample(NanDenoiser(), cond, WeatherStrength(), steps=3, seed=0)
