"""Deterministic 2.5D scene renderer: gradient sky, perspective checkered
ground, and billboard objects with depth-dependent horizontal parallax.

Rendering is a pure function of the SceneSpec: identical specs give
bit-identical frames, depth maps, and masks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..types import DimensionError, SceneMeta, VideoTensor

D_SKY = 1000.0        # meters assigned to sky pixels; fog saturates to airlight there
D_GROUND_MAX = 200.0  # ground-plane depth cap, keeps 16-bit depth PNGs in range
D_GROUND_NEAR = 4.0   # depth of the bottom image row
OBJECT_DEPTH_RANGE = (5.0, 60.0)


@dataclass(frozen=True)
class SceneSpec:
    """Everything the renderer needs; the palette and object layout are
    derived from the seed."""

    seed: int
    H: int = 32
    W: int = 32
    L: int = 16
    n_objects: Optional[int] = None  # None: drawn from the seed, in [2, 6]
    camera_speed: float = 4.0        # px*m/frame; per-frame shift = camera_speed / depth
    fps: float = 8.0


def horizon_row(H: int) -> int:
    return int(round(0.55 * H))


def ground_depth_profile(H: int, horizon: int) -> np.ndarray:
    """Depth in meters for each ground row (rows >= horizon)."""
    rows = np.arange(horizon, H, dtype=np.float64)
    k = D_GROUND_NEAR * (H - 1 - horizon + 0.5)
    d = k / (rows - horizon + 0.5)
    return np.minimum(d, D_GROUND_MAX)


def _interval_coverage(lo: float, hi: float, n: int) -> np.ndarray:
    """Per-pixel coverage of the interval [lo, hi] over cells [j, j+1)."""
    j = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, j + 1.0) - np.maximum(lo, j), 0.0, 1.0)


def _square_wave_integral(u: np.ndarray, cell: float) -> np.ndarray:
    """g(u) = integral over [0, u) of the square wave that is 1 on odd cells."""
    period = 2.0 * cell
    q, r = np.divmod(u, period)
    return q * cell + np.maximum(0.0, r - cell)


def checker_coverage(u: np.ndarray, cell: float) -> np.ndarray:
    """Exact fraction of pixel footprint [u, u+1) lying on odd checker cells."""
    return _square_wave_integral(u + 1.0, cell) - _square_wave_integral(u, cell)


def _palette(rng: np.random.Generator) -> dict:
    # The horizon sky matches the fog airlight (hazy-day convention); this
    # keeps RMS contrast monotone under fog instead of brightening the sky.
    u = rng.random(4)
    sky_top = np.array([0.70 + 0.05 * u[0], 0.75 + 0.04 * u[1], 0.83 + 0.03 * u[2]])
    sky_bottom = np.array([0.78, 0.80, 0.82])
    g = 0.30 + 0.25 * u[3]
    ground_a = np.array([g, g * 0.95, g * 0.72])
    ground_b = ground_a * 0.72
    return {
        "sky_top": sky_top,
        "sky_bottom": sky_bottom,
        "ground_a": ground_a,
        "ground_b": ground_b,
    }


def _object_color(rng: np.random.Generator) -> np.ndarray:
    base = rng.random(3) * 0.45 + 0.15
    hot = int(rng.integers(0, 3))
    base[hot] = 0.55 + 0.40 * rng.random()
    return base


def render_clear(spec: SceneSpec) -> tuple[VideoTensor, SceneMeta]:
    """Render the weather-free clip plus its depth map and region masks."""
    H, W, L = spec.H, spec.W, spec.L
    if H < 16 or W < 16:
        raise DimensionError(f"scene must be at least 16x16, got {H}x{W}")
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), 0x5CE, 1]))
    pal = _palette(rng)
    horizon = horizon_row(H)

    n_obj = spec.n_objects
    if n_obj is None:
        n_obj = int(rng.integers(2, 7))
    if not (2 <= n_obj <= 6):
        raise ValueError(f"n_objects must be in [2, 6], got {n_obj}")

    # Object layout (all seed-derived, drawn in a fixed order).
    objs = []
    for _ in range(n_obj):
        d = OBJECT_DEPTH_RANGE[0] + rng.random() * (OBJECT_DEPTH_RANGE[1] - OBJECT_DEPTH_RANGE[0])
        kind = "rect" if rng.random() < 0.5 else "ellipse"
        color = _object_color(rng)
        half_w = (0.05 + 0.10 * rng.random()) * W
        height = (0.15 + 0.30 * rng.random()) * H
        x0 = (0.08 + 0.84 * rng.random()) * W
        objs.append({"depth": d, "kind": kind, "color": color,
                     "half_w": half_w, "height": height, "x0": x0})
    objs.sort(key=lambda o: -o["depth"])  # far first; nearer drawn on top

    # Static background: sky gradient and ground base colors.
    bg = np.zeros((H, W, 3), dtype=np.float64)
    sky_rows = np.arange(horizon, dtype=np.float64)
    a = sky_rows / max(horizon - 1, 1)
    bg[:horizon] = ((1 - a)[:, None] * pal["sky_top"] + a[:, None] * pal["sky_bottom"])[:, None, :]

    ground_d = ground_depth_profile(H, horizon)  # (H - horizon,)
    k_ground = D_GROUND_NEAR * (H - 1 - horizon + 0.5)
    cell = max(2.0, round(H / 8))

    frames = np.zeros((L, H, W, 3), dtype=np.float64)
    depth = np.zeros((L, H, W), dtype=np.float64)
    obj_masks = np.zeros((n_obj, L, H, W), dtype=bool)

    xs = np.arange(W, dtype=np.float64)
    row_par = (np.arange(horizon, H) // int(cell)) % 2

    for t in range(L):
        frame = bg.copy()
        # Ground: checker with per-row parallax scroll, exact pixel coverage.
        u = xs[None, :] + spec.camera_speed * t / ground_d[:, None]
        cov = checker_coverage(u, cell)
        f = cov * (1 - row_par)[:, None] + (1.0 - cov) * row_par[:, None]
        frame[horizon:] = (1 - f)[..., None] * pal["ground_a"] + f[..., None] * pal["ground_b"]

        d = np.full((H, W), D_SKY)
        d[horizon:] = ground_d[:, None]

        for oi, o in enumerate(objs):
            xc = o["x0"] - spec.camera_speed * t / o["depth"]
            y_bottom = horizon + k_ground / o["depth"] - 0.5
            y_top = y_bottom - o["height"]
            cov_x = _interval_coverage(xc - o["half_w"], xc + o["half_w"], W)
            cov_y = _interval_coverage(y_top, y_bottom, H)
            if o["kind"] == "rect":
                alpha = cov_y[:, None] * cov_x[None, :]
            else:
                yc, b = (y_top + y_bottom) / 2, o["height"] / 2
                q = (((xs - xc) / o["half_w"]) ** 2
                     + (((np.arange(H) - yc) / b) ** 2)[:, None])
                alpha = np.clip(2.0 * (1.0 - q), 0.0, 1.0)
            frame = frame * (1 - alpha[..., None]) + o["color"] * alpha[..., None]
            hard = alpha > 0.5
            d[hard] = o["depth"]
            obj_masks[oi, t] = hard

        frames[t] = frame
        depth[t] = d

    object_mask = obj_masks.any(axis=0)
    rows = np.arange(H)[None, :, None]
    sky_mask = (rows < horizon) & ~object_mask
    ground_mask = (rows >= horizon) & ~object_mask

    video = VideoTensor(frames=np.clip(frames, 0.0, 1.0), domain_tag="unit", fps=spec.fps)
    meta = SceneMeta(
        depth=depth,
        sky_mask=np.broadcast_to(sky_mask, (L, H, W)).copy(),
        ground_mask=np.broadcast_to(ground_mask, (L, H, W)).copy(),
        object_mask=object_mask,
        horizon_row=horizon,
        object_masks=tuple(obj_masks[i] for i in range(n_obj)),
    )
    return video, meta
