"""Exactly invertible latent codec and domain conversions.

The codec is a space-to-depth rearrangement: each f x f x 3 spatial block of a
frame becomes one latent site with C = 3*f^2 channels. Temporal resolution is
preserved. Block raster order is row-major within the block with the RGB
channel varying fastest, i.e. latent channel (di*f + dj)*3 + c holds pixel
(di, dj) channel c of the block. decode(encode(v)) == v exactly.

The codec is stateless and pluggable: anything with encode/decode and a
codec_id can stand in (e.g. a learned VAE later).
"""

from __future__ import annotations

import numpy as np

from .types import (
    SIGNED,
    UNIT,
    CodecError,
    ConditionMap,
    DimensionError,
    DomainError,
    LatentTensor,
    N_EFFECTS,
    VideoTensor,
    WeatherStrength,
)

DEFAULT_FACTOR = 2


def codec_id(factor: int) -> str:
    return f"s2d:f={factor}"


def encode(video: VideoTensor, factor: int = DEFAULT_FACTOR) -> LatentTensor:
    """Rearrange a signed-domain video into an (L, H/f, W/f, 3f^2) latent."""
    if video.domain_tag != SIGNED:
        raise DomainError("encode expects the signed model domain; call to_signed first")
    f = int(factor)
    if f < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    L, H, W = video.L, video.H, video.W
    if H % f:
        raise DimensionError(f"H={H} not divisible by codec factor {f}")
    if W % f:
        raise DimensionError(f"W={W} not divisible by codec factor {f}")
    h, w = H // f, W // f
    code = (
        video.frames.reshape(L, h, f, w, f, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(L, h, w, 3 * f * f)
    )
    return LatentTensor(code=code, codec_id=codec_id(f))


def factor_of(latent: LatentTensor) -> int:
    """Recover the codec factor from the channel count (C = 3f^2)."""
    C = latent.C
    if C % 3:
        raise CodecError(f"channel count {C} is not of the form 3*f^2")
    f = int(round((C // 3) ** 0.5))
    if 3 * f * f != C:
        raise CodecError(f"channel count {C} is not of the form 3*f^2")
    return f


def decode(latent: LatentTensor) -> VideoTensor:
    """Exact inverse of encode; returns a signed-domain video."""
    f = factor_of(latent)
    l, h, w = latent.l, latent.h, latent.w
    frames = (
        latent.code.reshape(l, h, w, f, f, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(l, h * f, w * f, 3)
    )
    return VideoTensor(frames=frames, domain_tag=SIGNED)


def decode_array(code: np.ndarray, factor: int) -> np.ndarray:
    """decode for raw arrays (no domain validation); used on model outputs
    that may spill slightly outside [-1, 1] before clamping."""
    f = int(factor)
    l, h, w, C = code.shape
    if C != 3 * f * f:
        raise CodecError(f"channel count {C} != 3*{f}^2")
    return (
        code.reshape(l, h, w, f, f, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(l, h * f, w * f, 3)
    )


def to_signed(video: VideoTensor) -> VideoTensor:
    """[0,1] -> [-1,1] via x -> 2x - 1."""
    if video.domain_tag != UNIT:
        raise DomainError(f"to_signed expects unit domain, got {video.domain_tag}")
    return VideoTensor(frames=video.frames * 2.0 - 1.0, domain_tag=SIGNED, fps=video.fps)


def to_unit(video: VideoTensor) -> VideoTensor:
    """[-1,1] -> [0,1] via x -> (x + 1) / 2."""
    if video.domain_tag != SIGNED:
        raise DomainError(f"to_unit expects signed domain, got {video.domain_tag}")
    return VideoTensor(frames=(video.frames + 1.0) * 0.5, domain_tag=UNIT, fps=video.fps)


def make_condition_map(s: WeatherStrength, l: int, h: int, w: int) -> ConditionMap:
    """Broadcast the strength vector to every latent space-time site."""
    if min(l, h, w) < 1:
        raise DimensionError(f"condition map shape ({l},{h},{w}) must be >= 1")
    m = np.broadcast_to(s.as_array(), (l, h, w, N_EFFECTS)).copy()
    return ConditionMap(map=m)


def wrap_image_as_video(image: np.ndarray, domain_tag: str = UNIT, fps: float = 8.0) -> VideoTensor:
    """Treat a single H x W x 3 image as a one-frame video."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected (H,W,3) image, got {img.shape}")
    return VideoTensor(frames=img[None], domain_tag=domain_tag, fps=fps)
