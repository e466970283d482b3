"""Auto-labeling: turn weather-only footage into pseudo-pairs.

The trained removal model manufactures the clear side; analytic estimators
invert the compositor's formulas to recover per-effect strengths. With scene
meta (depth, masks) the estimators are the exact inverses of the rendering
constants; without it they fall back to row-index depth proxies and halved
confidences. Effects whose confidence lands below CONFIDENCE_GATE are
labeled 0: conservative under-labeling beats wrong conditioning.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .edit import StageError, edit_video
from .procsim.effects import EffectParams, luminance
from .procsim.scene import D_SKY, ground_depth_profile, horizon_row
from .types import EFFECTS, SamplePair, SceneMeta, VideoTensor, WeatherStrength

ESTIMATOR_VERSION = "analytic:v1"
CONFIDENCE_GATE = 0.2

# Detected pixels per particle, calibrated once against single-effect
# oracle clips at 64x64 and frozen (see tests/test_autolabel.py).
RAIN_PX_PER_STREAK = 2.8
SNOW_PX_PER_FLAKE = 0.98

_TRANSIENT_DIFF = 0.15
_PUDDLE_DIFF = 0.08
_SNOWCOVER_DENOM_MIN = 0.1
_FOG_T_FLOOR = 0.02
_FOG_BINS = 8


@dataclass(frozen=True)
class StrengthEstimate:
    s_hat: WeatherStrength
    confidence: dict
    method: str  # analytic_with_meta | heuristic_blind


def remove_weather(
    ckpt_path: Path,
    video: VideoTensor,
    s: Optional[WeatherStrength] = None,
    steps: int = 30,
    seed: int = 0,
    device: str = "cpu",
    use_ema: bool = True,
) -> VideoTensor:
    """Run the removal model on a unit-domain clip; returns the clear estimate."""
    if s is None:
        s = WeatherStrength.ones()  # effects to remove unknown: remove everything
    return edit_video(ckpt_path, video, s, mode="remove", steps=steps,
                      seed=seed, device=device, use_ema=use_ema)


# --- per-effect estimators ----------------------------------------------------

def _est_fog(w, c, depth, sky_mask, p: EffectParams):
    """Per-depth-bin least squares of I_w = t*I_c + (1-t)*A, then
    beta = mean(-ln t / depth) over usable bins."""
    A = np.asarray(p.airlight)
    finite = ~sky_mask & (depth < D_SKY * 0.9)
    if finite.sum() < 50:
        return 0.0, 0.0
    d = depth[finite]
    num = ((w - A) * (c - A)).sum(axis=-1)[finite]
    den = ((c - A) ** 2).sum(axis=-1)[finite]
    edges = np.geomspace(max(d.min(), 1e-3), d.max() + 1e-6, _FOG_BINS + 1)
    betas, used = [], 0
    for lo, hi in zip(edges[:-1], edges[1:]):
        m = (d >= lo) & (d < hi)
        if m.sum() < 20 or den[m].sum() < 1e-6:
            continue
        t_hat = num[m].sum() / den[m].sum()
        d_bar = (d[m] * den[m]).sum() / den[m].sum()
        if t_hat < _FOG_T_FLOOR:  # saturated to airlight: uninformative
            continue
        used += 1
        betas.append(-np.log(min(t_hat, 1.0)) / d_bar)
    if not betas:
        return 0.0, 0.0
    s_hat = float(np.clip(np.mean(betas) / p.beta_max, 0.0, 1.0))
    return s_hat, used / _FOG_BINS


def _est_cloud(w, c, nonsky_mask, p: EffectParams):
    if nonsky_mask.sum() < 50:
        return 0.0, 0.0
    lw = luminance(w)[nonsky_mask].mean()
    lc = luminance(c)[nonsky_mask].mean()
    if lc < 1e-3:
        return 0.0, 0.0
    return float(np.clip((1.0 - lw / lc) / p.cloud_dim, 0.0, 1.0)), 1.0


def _est_snow_coverage(w, c, ground_mask, p: EffectParams):
    cover = np.asarray(p.snowcover_color)
    denom = cover - c
    ok = (np.abs(denom) >= _SNOWCOVER_DENOM_MIN) & ground_mask[..., None]
    if ok.sum() < 50:
        return 0.0, 0.0
    ratio = (w - c)[ok] / denom[ok]
    return float(np.clip(ratio.mean() / 0.9, 0.0, 1.0)), float(min(1.0, ok.mean() * 4))


def _est_puddle(w, c, ground_mask, p: EffectParams):
    # restrict to pixels that are ground in every frame: puddles there show
    # their full reflection difference instead of a motion-diluted one
    gm = ground_mask.all(axis=0)
    if gm.sum() < 50:
        gm = ground_mask.any(axis=0)
    if gm.sum() < 50:
        return 0.0, 0.0
    change = np.abs(w - c).mean(axis=(0, 3))  # per-pixel over frames & channels
    frac = float((change[gm] > _PUDDLE_DIFF).mean())
    return float(np.clip(frac, 0.0, 1.0)), 1.0


def _global_dim_factor(w, c) -> float:
    """Robust brightness ratio of weather vs clear; particles barely move the
    median, so this recovers the compositor's global luminance dim."""
    lc = luminance(c)
    ok = lc > 0.05
    if not ok.any():
        return 1.0
    return float(np.clip(np.median(luminance(w)[ok] / lc[ok]), 0.5, 1.0))


def _transient_mask(w, c):
    # undo the global dim first, so particle contrast does not fade with s;
    # a pixel is a particle candidate when any channel brightens past the
    # threshold; pixels bright in 3+ consecutive frames are persistent scene
    # changes, not falling particles, and are excluded
    k = _global_dim_factor(w, c)
    diff = (w / k - c).max(axis=-1)
    m = diff > _TRANSIENT_DIFF
    L = m.shape[0]
    if L >= 3:
        runs = np.zeros_like(m)
        for t in range(1, L - 1):
            runs[t - 1:t + 2] |= m[t - 1] & m[t] & m[t + 1]
        m = m & ~runs
    return m


def _est_particles(w, c, p: EffectParams):
    """Split transient bright pixels into streaks vs blobs by elongation."""
    L, H, W = w.shape[:3]
    mask = _transient_mask(w, c)
    structure = np.ones((3, 3), dtype=int)
    rain_px = np.zeros(L)
    snow_px = np.zeros(L)
    for t in range(L):
        labels, n = ndimage.label(mask[t], structure=structure)
        if n == 0:
            continue
        slices = ndimage.find_objects(labels)
        for comp, sl in enumerate(slices, start=1):
            hh = sl[0].stop - sl[0].start
            ww = sl[1].stop - sl[1].start
            size = int((labels[sl] == comp).sum())
            # streaks are near-vertical fragments; flakes are points
            if hh >= 2 and hh > ww:
                rain_px[t] += size
            else:
                snow_px[t] += size
    n_rain_max = p.rain_density * H * W
    n_snow_max = p.snow_density * H * W
    s_rain = float(np.clip(rain_px.mean() / (RAIN_PX_PER_STREAK * n_rain_max), 0.0, 1.0))
    s_snow = float(np.clip(snow_px.mean() / (SNOW_PX_PER_FLAKE * n_snow_max), 0.0, 1.0))
    conf = float(min(1.0, L / 3))
    return s_rain, s_snow, conf


def _proxy_meta(L: int, H: int, W: int) -> SceneMeta:
    """Row-index depth proxy for blind estimation."""
    horizon = horizon_row(H)
    depth = np.full((H, W), 150.0)
    depth[horizon:] = ground_depth_profile(H, horizon)[:, None]
    rows = np.arange(H)[:, None]
    sky = np.broadcast_to(rows < horizon, (H, W))
    return SceneMeta(
        depth=np.broadcast_to(depth, (L, H, W)).copy(),
        sky_mask=np.broadcast_to(sky, (L, H, W)).copy(),
        ground_mask=np.broadcast_to(~sky, (L, H, W)).copy(),
        object_mask=np.zeros((L, H, W), dtype=bool),
        horizon_row=horizon,
    )


def estimate_strengths(
    weather: VideoTensor,
    clear: VideoTensor,
    meta: Optional[SceneMeta] = None,
    params: EffectParams = EffectParams(),
) -> StrengthEstimate:
    """Invert the compositor: recover per-effect strengths from a pair.

    In blind mode (meta=None) `clear` is typically the removal model's
    output; depth falls back to a row-index proxy and confidences are
    halved.
    """
    if weather.frames.shape != clear.frames.shape:
        raise ValueError("weather and clear shapes must match")
    w = weather.frames.astype(np.float64)
    c = clear.frames.astype(np.float64)
    blind = meta is None
    m = _proxy_meta(*w.shape[:3]) if blind else meta

    s_fog, cf_fog = _est_fog(w, c, m.depth, m.sky_mask, params)
    s_cloud, cf_cloud = _est_cloud(w, c, ~m.sky_mask, params)
    s_sc, cf_sc = _est_snow_coverage(w, c, m.ground_mask, params)
    s_pud, cf_pud = _est_puddle(w, c, m.ground_mask, params)
    s_rain, s_snow, cf_part = _est_particles(w, c, params)

    conf = {
        "cloud": cf_cloud, "fog": cf_fog, "rain": cf_part,
        "snow": cf_part, "puddle": cf_pud, "snow_coverage": cf_sc,
    }
    if blind:
        conf = {k: v * 0.5 for k, v in conf.items()}
    s_hat = WeatherStrength(cloud=s_cloud, fog=s_fog, rain=s_rain,
                            snow=s_snow, puddle=s_pud, snow_coverage=s_sc)
    return StrengthEstimate(
        s_hat=s_hat,
        confidence=conf,
        method="heuristic_blind" if blind else "analytic_with_meta",
    )


def gate_estimate(est: StrengthEstimate) -> WeatherStrength:
    """Zero out effects whose estimator confidence is below the gate."""
    vals = {e: (getattr(est.s_hat, e) if est.confidence[e] >= CONFIDENCE_GATE else 0.0)
            for e in EFFECTS}
    return WeatherStrength(**vals)


def emit_pseudo_pairs(
    ckpt_path: Path,
    weather_clips: Sequence[SamplePair],
    out_dir: Path,
    steps: int = 30,
    seed: int = 0,
    device: str = "cpu",
    params: EffectParams = EffectParams(),
    max_skip_fraction: float = 0.2,
) -> dict:
    """Label weather-only clips with the removal model; writes pairs with
    source=real_autolabeled plus a manifest carrying the checkpoint hash."""
    from .videoio import quantize_unit, write_pair

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(ckpt_path)
    manifest_doc = json.loads(
        (ckpt_path.parent / f"{ckpt_path.stem}_manifest.json").read_text()
    )
    if manifest_doc["stage"] != "removal_base":
        raise StageError(f"expected a removal checkpoint, got {manifest_doc['stage']!r}")
    ckpt_sha = manifest_doc["weights_sha256"]

    samples, report_rows, skipped = [], [], 0
    for i, clip in enumerate(weather_clips):
        sid = clip.sample_id or f"real_{i:05d}"
        try:
            t0 = time.time()
            pseudo_clear = remove_weather(ckpt_path, clip.weather, steps=steps,
                                          seed=seed + i, device=device)
            est = estimate_strengths(clip.weather, pseudo_clear, clip.meta, params)
            labeled = gate_estimate(est)
            pair = SamplePair(
                weather=clip.weather,
                clear=pseudo_clear.with_frames(quantize_unit(pseudo_clear.frames)),
                strengths=labeled,
                source="real_autolabeled",
                meta=clip.meta,
                sample_id=f"auto_{sid}",
            )
            checks = write_pair(out_dir / pair.sample_id, pair,
                                extra_meta={"split": "train", "removal_ckpt_sha256": ckpt_sha})
            agg = hashlib.sha256("".join(sorted(checks.values())).encode()).hexdigest()
            samples.append({
                "id": pair.sample_id,
                "seed": seed + i,
                "strengths": labeled.as_dict(),
                "split": "train",
                "source": "real_autolabeled",
                "paths": {"dir": pair.sample_id},
                "sha256": agg,
            })
            report_rows.append({
                "id": sid,
                "estimate": est.s_hat.as_dict(),
                "labeled": labeled.as_dict(),
                "confidence": est.confidence,
                "method": est.method,
                "wall": time.time() - t0,
            })
        except Exception as exc:  # per-clip failures are logged and skipped
            skipped += 1
            report_rows.append({"id": sid, "error": f"{type(exc).__name__}: {exc}"})
    if len(weather_clips) and skipped / len(weather_clips) > max_skip_fraction:
        raise RuntimeError(
            f"auto-labeling skipped {skipped}/{len(weather_clips)} clips "
            f"(> {max_skip_fraction:.0%}); see autolabel_report.json"
        )

    manifest = {
        "version": 1,
        "removal_ckpt_sha256": ckpt_sha,
        "estimator_version": ESTIMATOR_VERSION,
        "effect_params": params.to_dict(),
        "samples": samples,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (out_dir / "autolabel_report.json").write_text(
        json.dumps({"clips": report_rows, "skipped": skipped}, indent=1, sort_keys=True)
    )
    return manifest
