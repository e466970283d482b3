"""Analytic weather compositor: six effects with physically grounded knobs.

Every effect is deterministic given (clear, meta, s, seed), returns the input
bit-exactly at s = 0, and stays inside [0, 1]. Fog follows the Koschmieder
law I' = t*I + (1-t)*A with t = exp(-beta * depth); rain and snow are
advected seeded particle streams so they are temporally coherent; puddles
and snow cover are persistent scene changes.

The constants live in EffectParams and are recorded in every dataset
manifest, so the strength estimators invert exactly the renderer that made
the data.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from ..types import EFFECTS, SceneMeta, VideoTensor, WeatherStrength

# Application order: surface changes, then atmosphere, then particles.
COMPOSE_ORDER = ("cloud", "snow_coverage", "puddle", "fog", "rain", "snow")

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class EffectParams:
    beta_max: float = 0.08                                  # fog extinction ceiling, 1/m
    airlight: tuple = (0.78, 0.80, 0.82)
    rain_density: float = 0.004                             # max streaks per pixel per frame
    snow_density: float = 0.006                             # max flakes per pixel per frame
    cloud_dim: float = 0.35
    cloud_desat: float = 0.40
    snowcover_color: tuple = (0.92, 0.93, 0.95)
    puddle_reflect_weight: float = 0.6
    puddle_base_weight: float = 0.4
    puddle_base_dim: float = 0.7
    rain_streak_len_frac: float = 0.12                      # of H
    rain_tilt_deg: float = 12.0
    rain_alpha: float = 0.35
    rain_color: tuple = (0.85, 0.88, 0.92)
    rain_fall_frac: float = 0.30                            # of H, per frame
    rain_dim: float = 0.15
    snow_alpha: float = 0.8
    snow_color: tuple = (0.95, 0.96, 0.99)
    snow_fall_frac: float = 0.08
    snow_dim: float = 0.10

    def __post_init__(self):
        for name, v in asdict(self).items():
            arr = np.atleast_1d(np.asarray(v, dtype=np.float64))
            if np.any(arr <= 0):
                raise ValueError(f"effect parameter {name} must be strictly positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EffectParams":
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)

    def n_rain(self, H: int, W: int, s: float) -> int:
        return int(round(s * self.rain_density * H * W))

    def n_snow(self, H: int, W: int, s: float) -> int:
        return int(round(s * self.snow_density * H * W))


def _effect_rng(seed: int, effect: str) -> np.random.Generator:
    # Per-effect child stream so compose_effects and a stand-alone
    # apply_effect see identical randomness for the same (seed, effect).
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0xEFF, EFFECTS.index(effect)]))


def value_noise(rng: np.random.Generator, H: int, W: int, cells: int) -> np.ndarray:
    """Bilinear lattice noise in [0, 1]."""
    grid = rng.random((cells + 1, cells + 1))
    py = np.linspace(0.0, cells, H)
    px = np.linspace(0.0, cells, W)
    iy = np.minimum(py.astype(int), cells - 1)
    ix = np.minimum(px.astype(int), cells - 1)
    fy = (py - iy)[:, None]
    fx = (px - ix)[None, :]
    g00 = grid[iy][:, ix]
    g01 = grid[iy][:, ix + 1]
    g10 = grid[iy + 1][:, ix]
    g11 = grid[iy + 1][:, ix + 1]
    return (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
            + g10 * fy * (1 - fx) + g11 * fy * fx)


def two_octave_noise(rng: np.random.Generator, H: int, W: int, cells: int = 4) -> np.ndarray:
    n = value_noise(rng, H, W, cells) + 0.5 * value_noise(rng, H, W, 2 * cells)
    return n / 1.5


def _rank_uniform(field2d: np.ndarray) -> np.ndarray:
    """Map a field to exact discrete-uniform [0, 1] by rank (stable ties)."""
    flat = field2d.ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty_like(order)
    ranks[order] = np.arange(flat.size)
    return (ranks / max(flat.size - 1, 1)).reshape(field2d.shape)


def luminance(frames: np.ndarray) -> np.ndarray:
    return frames @ LUMA


# --- individual effects (array in, array out; unit domain) -------------------

def _cloud(frames, meta, s, seed, p: EffectParams):
    H, W = frames.shape[1:3]
    rng = _effect_rng(seed, "cloud")
    tex = 0.55 + 0.30 * two_octave_noise(rng, H, W)
    sky = meta.sky_mask[..., None]
    tex_full = np.broadcast_to(tex[None, :, :, None], frames.shape)
    clouded = (1 - s) * frames + s * tex_full
    dimmed = frames * (1.0 - p.cloud_dim * s)
    y = luminance(dimmed)[..., None]
    desat = y + (dimmed - y) * (1.0 - p.cloud_desat * s)
    return np.where(sky, clouded, desat)


def _fog(frames, meta, s, seed, p: EffectParams):
    t = np.exp(-p.beta_max * s * meta.depth)[..., None]
    A = np.asarray(p.airlight)
    return t * frames + (1.0 - t) * A


def rain_particles(H: int, W: int, L: int, s: float, seed: int, p: EffectParams) -> np.ndarray:
    """Streak anchor positions per frame, shape (L, N, 2) as (y, x).

    N = round(s * rain_density * H * W) exactly; anchors fall 0.3H per frame
    and wrap, so each streak is a coherent stream across frames.
    """
    rng = _effect_rng(seed, "rain")
    n = p.n_rain(H, W, s)
    x0 = rng.random(n) * W
    y0 = rng.random(n) * H
    t = np.arange(L, dtype=np.float64)[:, None]
    y = (y0[None, :] + p.rain_fall_frac * H * t) % H
    x = np.broadcast_to(x0[None, :], (L, n)).copy()
    return np.stack([y, x], axis=-1)


def _splat_segments(H, W, anchors, length, tilt_rad):
    """Accumulate anti-aliased coverage of line segments into an alpha map."""
    cov = np.zeros((H, W), dtype=np.float64)
    if anchors.shape[0] == 0:
        return cov
    dx, dy = np.sin(tilt_rad), np.cos(tilt_rad)
    steps = max(4, int(np.ceil(length * 4)))
    ts = np.linspace(0.0, length, steps)
    w_pt = length / steps  # mass per sample point, ~0.25 px
    ys = (anchors[:, 0:1] + ts[None, :] * dy).ravel() % H
    xs = (anchors[:, 1:2] + ts[None, :] * dx).ravel() % W
    iy = np.floor(ys).astype(int)
    ix = np.floor(xs).astype(int)
    fy = ys - iy
    fx = xs - ix
    iy1 = (iy + 1) % H
    ix1 = (ix + 1) % W
    np.add.at(cov, (iy, ix), w_pt * (1 - fy) * (1 - fx))
    np.add.at(cov, (iy, ix1), w_pt * (1 - fy) * fx)
    np.add.at(cov, (iy1, ix), w_pt * fy * (1 - fx))
    np.add.at(cov, (iy1, ix1), w_pt * fy * fx)
    return np.minimum(cov, 1.0)


def _rain(frames, meta, s, seed, p: EffectParams):
    L, H, W = frames.shape[:3]
    anchors = rain_particles(H, W, L, s, seed, p)
    out = frames * (1.0 - p.rain_dim * s)
    tilt = np.deg2rad(p.rain_tilt_deg)
    color = np.asarray(p.rain_color)
    length = p.rain_streak_len_frac * H
    for ti in range(L):
        cov = _splat_segments(H, W, anchors[ti], length, tilt)
        a = (p.rain_alpha * cov)[..., None]
        out[ti] = out[ti] * (1 - a) + color * a
    return out


def snow_particles(H: int, W: int, L: int, s: float, seed: int, p: EffectParams) -> np.ndarray:
    """Flake pixel positions per frame, shape (L, N, 2) as integer (row, col).

    N = round(s * snow_density * H * W) exactly; flakes fall 0.08H per frame
    with sinusoidal horizontal sway, wrapping at the borders.
    """
    rng = _effect_rng(seed, "snow")
    n = p.n_snow(H, W, s)
    x0 = rng.random(n) * W
    y0 = rng.random(n) * H
    amp = 0.5 + 1.5 * rng.random(n)
    freq = 0.05 + 0.10 * rng.random(n)
    phase = rng.random(n)
    t = np.arange(L, dtype=np.float64)[:, None]
    y = (y0[None, :] + p.snow_fall_frac * H * t) % H
    x = (x0[None, :] + amp * np.sin(2 * np.pi * (phase + freq * t))) % W
    rows = np.floor(y + 0.5).astype(int) % H
    cols = np.floor(x + 0.5).astype(int) % W
    return np.stack([rows, cols], axis=-1)


def _snow(frames, meta, s, seed, p: EffectParams):
    L, H, W = frames.shape[:3]
    pos = snow_particles(H, W, L, s, seed, p)
    out = frames * (1.0 - p.snow_dim * s)
    color = np.asarray(p.snow_color)
    for ti in range(L):
        rows, cols = pos[ti, :, 0], pos[ti, :, 1]
        px = out[ti, rows, cols]
        out[ti, rows, cols] = px * (1 - p.snow_alpha) + color * p.snow_alpha
    return out


def puddle_mask(meta: SceneMeta, s: float, seed: int) -> np.ndarray:
    """Static puddle mask over the ground plane (rows >= horizon).

    Rank thresholding of value noise: exactly floor(s * n_plane) pixels get
    wet, so coverage equals s up to 1/n_plane.
    """
    H, W = meta.depth.shape[1:3]
    rng = _effect_rng(seed, "puddle")
    noise = two_octave_noise(rng, H, W, cells=8)  # finer blobs: steadier coverage
    plane = np.zeros((H, W), dtype=bool)
    plane[meta.horizon_row:] = True
    idx = np.flatnonzero(plane.ravel())
    order = np.argsort(noise.ravel()[idx], kind="stable")
    k = int(np.floor(s * idx.size))
    mask = np.zeros(H * W, dtype=bool)
    mask[idx[order[:k]]] = True
    return mask.reshape(H, W)


def _puddle(frames, meta, s, seed, p: EffectParams):
    L, H, W = frames.shape[:3]
    pud = puddle_mask(meta, s, seed)
    # reflect about the sky/ground boundary line: row horizon maps to the
    # last sky row, never to itself
    mirror_rows = np.clip(2 * meta.horizon_row - 1 - np.arange(H), 0, H - 1)
    out = frames.copy()
    for ti in range(L):
        apply = pud & meta.ground_mask[ti]
        mirrored = frames[ti, mirror_rows]
        wet = (p.puddle_reflect_weight * mirrored
               + p.puddle_base_weight * p.puddle_base_dim * frames[ti])
        out[ti] = np.where(apply[..., None], wet, out[ti])
    return out


def _top_band(obj_mask_t: np.ndarray, band: int) -> np.ndarray:
    """Pixels within `band` rows of the per-column top edge of an object."""
    H, W = obj_mask_t.shape
    any_col = obj_mask_t.any(axis=0)
    top = np.where(any_col, obj_mask_t.argmax(axis=0), H)
    rows = np.arange(H)[:, None]
    return obj_mask_t & (rows < top[None, :] + band)


def _snow_coverage(frames, meta, s, seed, p: EffectParams):
    L, H, W = frames.shape[:3]
    rng = _effect_rng(seed, "snow_coverage")
    m_field = 0.8 + 0.2 * _rank_uniform(two_octave_noise(rng, H, W))
    color = np.asarray(p.snowcover_color)
    out = frames.copy()
    for ti in range(L):
        region = meta.ground_mask[ti].copy()
        for om in meta.object_masks:
            if not om[ti].any():
                continue
            height = int(om[ti].sum(axis=0).max())
            band = max(1, int(round(0.25 * height)))
            region |= _top_band(om[ti], band)
        w = (s * m_field * region)[..., None]
        out[ti] = out[ti] * (1 - w) + color * w
    return out


_EFFECT_FNS = {
    "cloud": _cloud,
    "fog": _fog,
    "rain": _rain,
    "snow": _snow,
    "puddle": _puddle,
    "snow_coverage": _snow_coverage,
}


def apply_effect(
    clear: VideoTensor,
    meta: SceneMeta,
    effect: str,
    s: float,
    seed: int,
    params: EffectParams = EffectParams(),
) -> VideoTensor:
    """Composite one effect at strength s onto a clip. s = 0 is the identity."""
    if effect not in _EFFECT_FNS:
        raise ValueError(f"unknown effect {effect!r}; expected one of {EFFECTS}")
    if not (0.0 <= s <= 1.0):
        raise ValueError(f"strength {s} outside [0, 1]")
    if meta.depth.shape != clear.frames.shape[:3]:
        raise ValueError("meta does not match clip shape")
    if s == 0.0:
        return VideoTensor(frames=clear.frames.copy(), domain_tag=clear.domain_tag, fps=clear.fps)
    out = _EFFECT_FNS[effect](clear.frames.astype(np.float64), meta, float(s), int(seed), params)
    return VideoTensor(frames=np.clip(out, 0.0, 1.0), domain_tag="unit", fps=clear.fps)


def compose_effects(
    clear: VideoTensor,
    meta: SceneMeta,
    s: WeatherStrength,
    seed: int,
    params: EffectParams = EffectParams(),
) -> VideoTensor:
    """Apply all active effects in the fixed order COMPOSE_ORDER."""
    out = clear
    for effect in COMPOSE_ORDER:
        strength = getattr(s, effect)
        if strength > 0.0:
            out = apply_effect(out, meta, effect, strength, seed, params)
    if out is clear:
        out = VideoTensor(frames=clear.frames.copy(), domain_tag=clear.domain_tag, fps=clear.fps)
    return out
