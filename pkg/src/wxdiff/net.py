"""Factorized spatio-temporal UNet for the raw denoising function F.

Per level: a spatial residual block (3x3 mixing over H, W; frames
independent) followed by a temporal block (kernel-3, zero-padded mixing over
L; sites independent). Spatial resolution halves between levels. The
bottleneck runs single-head spatial self-attention per frame, then temporal
self-attention per site. The decoder mirrors the encoder with skip
connections. The noise embedding (sinusoidal features of c_noise through a
two-layer map) modulates every block with a scale/shift.

Conditioning enters as extra input channels whose first-convolution weight
slices are zero at init, so a fresh model is exactly invariant to the
conditioning content. Tensors are (B, C, L, H, W) throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as fn


@dataclass(frozen=True)
class NetConfig:
    latent_channels: int = 12      # C of the codec (3 * f^2)
    base_width: int = 32
    channel_mults: tuple = (1, 2)
    temporal_kernel: int = 3
    noise_embed_dim: int = 64
    groups: int = 8

    @property
    def in_channels(self) -> int:
        return 2 * self.latent_channels + 6

    @property
    def out_channels(self) -> int:
        return self.latent_channels

    @property
    def downsample_factor(self) -> int:
        return 2 ** (len(self.channel_mults) - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        d = dict(d)
        if "channel_mults" in d:
            d["channel_mults"] = tuple(d["channel_mults"])
        return cls(**d)


def sinusoidal_features(x: torch.Tensor, dim: int, max_freq: float = 64.0) -> torch.Tensor:
    """Fourier features of a scalar per batch element, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), half, device=x.device))
    ang = x[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class Film(nn.Module):
    """Per-channel scale/shift from the noise embedding."""

    def __init__(self, embed_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Linear(embed_dim, 2 * channels)

    def forward(self, h, emb):
        scale, shift = self.proj(emb)[:, :, None, None, None].chunk(2, dim=1)
        return h * (1 + scale) + shift


class SpatialResBlock(nn.Module):
    def __init__(self, channels: int, embed_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1))
        self.film = Film(embed_dim, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv3d(channels, channels, (1, 3, 3), padding=(0, 1, 1))

    def forward(self, x, emb):
        h = self.conv1(fn.silu(self.norm1(x)))
        h = self.film(h, emb)
        h = self.conv2(fn.silu(self.norm2(h)))
        return x + h


class TemporalBlock(nn.Module):
    """Zero-padded kernel-k conv over frames; at L=1 this degenerates to a
    pointwise linear map plus the residual."""

    def __init__(self, channels: int, embed_dim: int, groups: int, kernel: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.conv = nn.Conv3d(channels, channels, (kernel, 1, 1),
                              padding=(kernel // 2, 0, 0))
        self.film = Film(embed_dim, channels)

    def forward(self, x, emb):
        h = self.conv(fn.silu(self.norm(x)))
        return x + self.film(h, emb)


class _Attention(nn.Module):
    """Single-head self-attention over one axis."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.proj = nn.Conv1d(channels, channels, 1)
        self.scale = channels ** -0.5

    def _attend(self, x):  # x: (N, C, T)
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        attn = torch.softmax(q.transpose(1, 2) @ k * self.scale, dim=-1)
        return self.proj((attn @ v.transpose(1, 2)).transpose(1, 2))


class SpatialAttention(_Attention):
    def forward(self, x, emb=None):
        B, C, L, H, W = x.shape
        flat = x.permute(0, 2, 1, 3, 4).reshape(B * L, C, H * W)
        out = self._attend(flat).reshape(B, L, C, H, W).permute(0, 2, 1, 3, 4)
        return x + out


class TemporalAttention(_Attention):
    def forward(self, x, emb=None):
        B, C, L, H, W = x.shape
        flat = x.permute(0, 3, 4, 1, 2).reshape(B * H * W, C, L)
        out = self._attend(flat).reshape(B, H, W, C, L).permute(0, 3, 4, 1, 2)
        return x + out


class DenoiserNet(nn.Module):
    def __init__(self, config: NetConfig = NetConfig()):
        super().__init__()
        self.config = config
        c = config
        w0 = c.base_width * c.channel_mults[0]
        w1 = c.base_width * c.channel_mults[1]
        ed = c.noise_embed_dim

        self.embed = nn.Sequential(
            nn.Linear(ed, ed), nn.SiLU(), nn.Linear(ed, ed),
        )
        self.in_conv = nn.Conv3d(c.in_channels, w0, (1, 3, 3), padding=(0, 1, 1))
        self.enc_s0 = SpatialResBlock(w0, ed, c.groups)
        self.enc_t0 = TemporalBlock(w0, ed, c.groups, c.temporal_kernel)
        self.down = nn.Conv3d(w0, w1, (1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        self.enc_s1 = SpatialResBlock(w1, ed, c.groups)
        self.enc_t1 = TemporalBlock(w1, ed, c.groups, c.temporal_kernel)
        self.mid_sattn = SpatialAttention(w1, c.groups)
        self.mid_tattn = TemporalAttention(w1, c.groups)
        self.fuse1 = nn.Conv3d(2 * w1, w1, 1)
        self.dec_s1 = SpatialResBlock(w1, ed, c.groups)
        self.dec_t1 = TemporalBlock(w1, ed, c.groups, c.temporal_kernel)
        self.up = nn.Conv3d(w1, w0, (1, 3, 3), padding=(0, 1, 1))
        self.fuse0 = nn.Conv3d(2 * w0, w0, 1)
        self.dec_s0 = SpatialResBlock(w0, ed, c.groups)
        self.dec_t0 = TemporalBlock(w0, ed, c.groups, c.temporal_kernel)
        self.out_norm = nn.GroupNorm(c.groups, w0)
        self.out_conv = nn.Conv3d(w0, c.out_channels, (1, 3, 3), padding=(0, 1, 1))

    def forward(self, x: torch.Tensor, c_noise: torch.Tensor) -> torch.Tensor:
        """x: (B, 2C+6, L, H, W); c_noise: (B,) -> (B, C, L, H, W)."""
        cfg = self.config
        B, Cin, L, H, W = x.shape
        if Cin != cfg.in_channels:
            raise ValueError(f"expected {cfg.in_channels} input channels, got {Cin}")
        if H % cfg.downsample_factor or W % cfg.downsample_factor:
            raise ValueError(
                f"H={H}, W={W} must be divisible by the downsample factor "
                f"{cfg.downsample_factor}"
            )
        if c_noise.ndim == 0:
            c_noise = c_noise[None]
        emb = self.embed(sinusoidal_features(c_noise.expand(B), cfg.noise_embed_dim))

        h0 = self.in_conv(x)
        h0 = self.enc_t0(self.enc_s0(h0, emb), emb)
        h1 = self.down(h0)
        h1 = self.enc_t1(self.enc_s1(h1, emb), emb)
        m = self.mid_tattn(self.mid_sattn(h1))
        d1 = self.fuse1(torch.cat([m, h1], dim=1))
        d1 = self.dec_t1(self.dec_s1(d1, emb), emb)
        u = self.up(fn.interpolate(d1, scale_factor=(1, 2, 2), mode="nearest"))
        d0 = self.fuse0(torch.cat([u, h0], dim=1))
        d0 = self.dec_t0(self.dec_s0(d0, emb), emb)
        return self.out_conv(fn.silu(self.out_norm(d0)))


def init_net(config: NetConfig = NetConfig(), seed: int = 0) -> DenoiserNet:
    """Deterministic initialization.

    Weights are Kaiming-uniform from a generator seeded with `seed`, biases
    zero, norm scales one. The first-convolution slices feeding the
    conditioning channels [C, 2C+6) are then zeroed, so the fresh network is
    exactly independent of conditioning content.
    """
    net = DenoiserNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if p.ndim <= 1:  # biases and norm shifts/scales
                if name.endswith("weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()
            else:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.empty_like(p).uniform_(-bound, bound, generator=gen))
        C = config.latent_channels
        net.in_conv.weight[:, C:, ...].zero_()
    return net


def param_count(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
