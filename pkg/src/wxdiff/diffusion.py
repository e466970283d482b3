"""Noise schedule, preconditioning, training losses, and the deterministic
probability-flow Euler sampler.

The schedule is the variance-exploding family: z_sigma = z_0 + sigma * eps,
with the denoiser parameterized as

    D(z; sigma, cond) = c_skip(sigma) * z + c_out(sigma) * F(c_in(sigma) * z
                                                             (+) cond; c_noise)

where (+) is channel concatenation in the fixed order
[noisy | cond_video | cond_map]. Conditioning channels are clean by
construction and are NOT scaled by c_in. F predicts the clean latent via
this skip/out decomposition; the two training losses are mirror images,
swapping which side of a pair is noised and which conditions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import NamedTuple, Optional

import numpy as np
import torch

from .codec import make_condition_map
from .types import ConditionMap, LatentTensor, SamplePair, WeatherStrength


class DivergenceError(RuntimeError):
    """Non-finite values encountered while sampling."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    alpha: float = 1.0  # variance-exploding convention

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho < 1:
            raise ValueError("rho must be >= 1")
        if self.sigma_data <= 0:
            raise ValueError("sigma_data must be positive")

    def sigma_grid(self, steps: int) -> np.ndarray:
        """Decreasing sigma_max..sigma_min grid (sigma=0 is appended by the
        sampler, not here)."""
        if steps < 1:
            raise ValueError("steps must be >= 1")
        if steps == 1:
            return np.array([self.sigma_max])
        i = np.arange(steps, dtype=np.float64)
        inv = 1.0 / self.rho
        return (self.sigma_max ** inv
                + i / (steps - 1) * (self.sigma_min ** inv - self.sigma_max ** inv)) ** self.rho

    def sample_sigma(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        """Training noise levels, log-normal(p_mean, p_std)."""
        return np.exp(self.p_mean + self.p_std * rng.standard_normal(n))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        return cls(**d)


class PreconditionCoeffs(NamedTuple):
    c_skip: object
    c_out: object
    c_in: object
    c_noise: object
    lam: object


def precondition_coeffs(sigma, sigma_data: float = 0.5) -> PreconditionCoeffs:
    """Closed-form preconditioning; works on floats, numpy arrays, and
    torch tensors."""
    if isinstance(sigma, torch.Tensor):
        log = torch.log
    elif isinstance(sigma, np.ndarray):
        log = np.log
    else:
        sigma = float(sigma)
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        log = math.log
    s2 = sigma ** 2 + sigma_data ** 2
    c_skip = sigma_data ** 2 / s2
    c_out = sigma * sigma_data / s2 ** 0.5
    c_in = 1.0 / s2 ** 0.5
    c_noise = log(sigma) / 4.0
    lam = s2 / (sigma * sigma_data) ** 2
    return PreconditionCoeffs(c_skip, c_out, c_in, c_noise, lam)


def add_noise(z0: LatentTensor, sigma: float, epsilon: np.ndarray) -> LatentTensor:
    """z_sigma = z_0 + sigma * eps (alpha = 1). Caller supplies eps for
    determinism."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    eps = np.asarray(epsilon, dtype=np.float32)
    if eps.shape != z0.code.shape:
        raise ValueError(f"epsilon shape {eps.shape} != latent shape {z0.code.shape}")
    return LatentTensor(code=z0.code + np.float32(sigma) * eps, codec_id=z0.codec_id)


@dataclass(frozen=True)
class DenoiseInput:
    """One denoiser call: noisy latent, clean conditioning latent, strength
    map, and the noise level. Concatenation order is fixed:
    [noisy | cond_video | cond_map]."""

    noisy: LatentTensor
    cond_video: LatentTensor
    cond_map: ConditionMap
    sigma: float

    def __post_init__(self):
        a, b, m = self.noisy.code.shape, self.cond_video.code.shape, self.cond_map.map.shape
        if a[:3] != b[:3] or a[:3] != m[:3]:
            raise ValueError(f"site shapes disagree: noisy {a[:3]}, cond {b[:3]}, map {m[:3]}")
        if a[3] != b[3]:
            raise ValueError(f"channel counts disagree: noisy {a[3]}, cond {b[3]}")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def _to_torch(code: np.ndarray, device) -> torch.Tensor:
    # (l, h, w, C) -> (1, C, l, h, w)
    return torch.from_numpy(np.ascontiguousarray(code)).permute(3, 0, 1, 2).unsqueeze(0).to(device)


def _to_numpy(x: torch.Tensor) -> np.ndarray:
    # (1, C, l, h, w) -> (l, h, w, C)
    return x.squeeze(0).permute(1, 2, 3, 0).detach().cpu().numpy()


class Denoiser:
    """Preconditioned wrapper around the raw network F."""

    def __init__(self, net: torch.nn.Module, schedule: NoiseSchedule = NoiseSchedule()):
        self.net = net
        self.schedule = schedule

    def denoise_torch(
        self,
        noisy: torch.Tensor,      # (B, C, L, H, W)
        cond_video: torch.Tensor, # (B, C, L, H, W)
        cond_map: torch.Tensor,   # (B, 6, L, H, W)
        sigma: torch.Tensor,      # (B,)
    ) -> torch.Tensor:
        if noisy.shape != cond_video.shape:
            raise ValueError(f"noisy {tuple(noisy.shape)} vs cond {tuple(cond_video.shape)}")
        if noisy.shape[2:] != cond_map.shape[2:]:
            raise ValueError(f"map sites {tuple(cond_map.shape[2:])} vs noisy {tuple(noisy.shape[2:])}")
        c = precondition_coeffs(sigma, self.schedule.sigma_data)
        bshape = (-1, 1, 1, 1, 1)
        x = torch.cat([c.c_in.reshape(bshape) * noisy, cond_video, cond_map], dim=1)
        F = self.net(x, c.c_noise)
        return c.c_skip.reshape(bshape) * noisy + c.c_out.reshape(bshape) * F

    def denoise(self, inp: DenoiseInput, device: str = "cpu") -> LatentTensor:
        with torch.no_grad():
            out = self.denoise_torch(
                _to_torch(inp.noisy.code, device),
                _to_torch(inp.cond_video.code, device),
                _to_torch(inp.cond_map.map, device),
                torch.full((1,), float(inp.sigma), device=device),
            )
        return LatentTensor(code=_to_numpy(out), codec_id=inp.noisy.codec_id)


def per_sample_losses(
    denoiser: Denoiser,
    target: torch.Tensor,
    cond_video: torch.Tensor,
    cond_map: torch.Tensor,
    sigma: torch.Tensor,
    epsilon: torch.Tensor,
) -> torch.Tensor:
    """lambda(sigma) * mean squared denoising error, one value per sample."""
    noisy = target + sigma.reshape(-1, 1, 1, 1, 1) * epsilon
    d = denoiser.denoise_torch(noisy, cond_video, cond_map, sigma)
    lam = precondition_coeffs(sigma, denoiser.schedule.sigma_data).lam
    return lam * (d - target).square().mean(dim=(1, 2, 3, 4))


def _batched_loss(denoiser, target, cond_video, cond_map, sigma, epsilon) -> torch.Tensor:
    loss = per_sample_losses(denoiser, target, cond_video, cond_map, sigma, epsilon).mean()
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss at sigma={sigma.detach().cpu().numpy().round(4).tolist()}"
        )
    return loss


def loss_synthesis_torch(denoiser, clear_lat, weather_lat, cond_map, sigma, epsilon):
    """Noisy/target = weather latent; condition = clear latent and strengths."""
    return _batched_loss(denoiser, weather_lat, clear_lat, cond_map, sigma, epsilon)


def loss_removal_torch(denoiser, clear_lat, weather_lat, cond_map, sigma, epsilon):
    """Mirror of the synthesis loss: noisy/target = clear latent, condition =
    weather latent and the strengths of the effects to remove."""
    return _batched_loss(denoiser, clear_lat, weather_lat, cond_map, sigma, epsilon)


def _pair_latents(pair: SamplePair, factor: int, device):
    from .codec import encode, to_signed
    zc = encode(to_signed(pair.clear), factor)
    zw = encode(to_signed(pair.weather), factor)
    cmap = make_condition_map(pair.strengths, zc.l, zc.h, zc.w)
    return (_to_torch(zc.code, device), _to_torch(zw.code, device),
            _to_torch(cmap.map, device))


def loss_synthesis(denoiser, pair: SamplePair, sigma: float, epsilon: np.ndarray,
                   factor: int = 2, device: str = "cpu") -> float:
    zc, zw, cmap = _pair_latents(pair, factor, device)
    eps = _to_torch(np.asarray(epsilon, dtype=np.float32), device)
    s = torch.full((1,), float(sigma), device=device)
    with torch.no_grad():
        return float(loss_synthesis_torch(denoiser, zc, zw, cmap, s, eps))


def loss_removal(denoiser, pair: SamplePair, sigma: float, epsilon: np.ndarray,
                 factor: int = 2, device: str = "cpu") -> float:
    zc, zw, cmap = _pair_latents(pair, factor, device)
    eps = _to_torch(np.asarray(epsilon, dtype=np.float32), device)
    s = torch.full((1,), float(sigma), device=device)
    with torch.no_grad():
        return float(loss_removal_torch(denoiser, zc, zw, cmap, s, eps))


def sample(
    denoiser: Denoiser,
    cond_video: LatentTensor,
    s: WeatherStrength,
    steps: int = 30,
    seed: int = 0,
    device: str = "cpu",
) -> LatentTensor:
    """Deterministic Euler integration of the probability-flow ODE over the
    rho-spaced sigma grid, starting from sigma_max * eps(seed)."""
    sched = denoiser.schedule
    grid = np.append(sched.sigma_grid(steps), 0.0)
    cond = _to_torch(cond_video.code, device)
    cmap = _to_torch(
        make_condition_map(s, cond_video.l, cond_video.h, cond_video.w).map, device
    )
    gen = torch.Generator(device=device).manual_seed(int(seed))
    z = sched.sigma_max * torch.randn(cond.shape, generator=gen, device=device)
    with torch.no_grad():
        for i in range(steps):
            sig = torch.full((1,), float(grid[i]), device=device)
            d = denoiser.denoise_torch(z, cond, cmap, sig)
            z = z + (grid[i + 1] - grid[i]) * (z - d) / grid[i]
            if not torch.isfinite(z).all():
                raise DivergenceError(f"non-finite latent at sampler step {i} "
                                      f"(sigma {grid[i]:.4g})")
    return LatentTensor(code=_to_numpy(z), codec_id=cond_video.codec_id)
