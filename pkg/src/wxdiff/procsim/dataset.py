"""Paired dataset construction: strength sampling, splits, manifest.

Strength sampling follows the recipe recorded in the manifest: each effect is
independently active with probability 1/2, active strengths are uniform in
[0.1, 1], and a fixed fraction of clips (default 25%) carry exactly one
effect for estimator calibration. Splits (train / val / pseudo_real) are
assigned by a hash of the clip seed; pseudo_real clips are written without
their clear counterpart, mimicking real footage.

A second pool of single-frame pairs stands in for the generative image
source: groups of five L=1 pairs of the same scene and effect at increasing
strengths, tagged source="generation".
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from ..types import EFFECTS, SamplePair, VideoTensor, WeatherStrength
from .effects import EffectParams, compose_effects
from .scene import SceneSpec, render_clear

MANIFEST_VERSION = 1
PAPER_CLIP_FRAMES = 100   # full-scale clips; desk-scale default below
DESK_CLIP_FRAMES = 16


@dataclass(frozen=True)
class DatasetConfig:
    out_dir: str = "data"
    n_scenes: int = 64
    n_generation_groups: int = 8   # each group: 5 single-frame pairs, one effect
    H: int = 32
    W: int = 32
    L: int = DESK_CLIP_FRAMES
    base_seed: int = 1234
    single_effect_fraction: float = 0.25
    camera_speed: float = 4.0
    fps: float = 8.0
    split_mod: int = 8             # hash % split_mod: <5 train, ==5 val, >5 pseudo_real
    effect_params: EffectParams = field(default_factory=EffectParams)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["effect_params"] = self.effect_params.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        if "effect_params" in d:
            d["effect_params"] = EffectParams.from_dict(d["effect_params"])
        return cls(**d)


def make_pair(
    spec: SceneSpec,
    s: WeatherStrength,
    seed: int,
    params: EffectParams = EffectParams(),
    sample_id: str = "",
) -> SamplePair:
    """Render a clear clip and composite its weather twin."""
    clear, meta = render_clear(spec)
    weather = compose_effects(clear, meta, s, seed, params)
    return SamplePair(
        clear=clear, weather=weather, strengths=s,
        source="simulation", meta=meta, sample_id=sample_id or f"scene{spec.seed}",
    )


def split_of(seed: int, split_mod: int = 8) -> str:
    h = int.from_bytes(hashlib.sha256(str(int(seed)).encode()).digest()[:4], "big")
    r = h % split_mod
    if r < 5:
        return "train"
    if r == 5:
        return "val"
    return "pseudo_real"


def sample_strengths(
    rng: np.random.Generator,
    single_effect: Optional[str] = None,
    p_identity: float = 0.1,
) -> WeatherStrength:
    """Per-effect Bernoulli(1/2) activity with active strengths ~ U[0.1, 1].

    A small fraction of clips are identity pairs (all zeros) so the models
    see the weather-free fixed point during training.
    """
    if single_effect is not None:
        return WeatherStrength(**{single_effect: 0.1 + 0.9 * rng.random()})
    if rng.random() < p_identity:
        return WeatherStrength.zeros()
    while True:
        active = rng.random(len(EFFECTS)) < 0.5
        vals = np.where(active, 0.1 + 0.9 * rng.random(len(EFFECTS)), 0.0)
        if active.any():
            return WeatherStrength.from_array(vals)


def emit_dataset(config: DatasetConfig) -> dict:
    """Render and write the dataset; returns the manifest (also on disk)."""
    from ..videoio import quantize_unit, write_pair  # deferred: avoid import cycle

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []

    def store(pair: SamplePair, split: str, seed: int, scene_seed: int):
        drop_clear = split == "pseudo_real"
        q = SamplePair(
            weather=pair.weather.with_frames(quantize_unit(pair.weather.frames)),
            clear=None if drop_clear else pair.clear.with_frames(quantize_unit(pair.clear.frames)),
            strengths=pair.strengths,
            source=pair.source,
            meta=pair.meta,
            sample_id=pair.sample_id,
        )
        pdir = out / q.sample_id
        checks = write_pair(pdir, q, extra_meta={"split": split, "seed": seed,
                                                 "scene_seed": scene_seed})
        agg = hashlib.sha256("".join(sorted(checks.values())).encode()).hexdigest()
        samples.append({
            "id": q.sample_id,
            "seed": seed,
            "scene_seed": scene_seed,
            "strengths": q.strengths.as_dict(),
            "split": split,
            "source": q.source,
            "paths": {"dir": q.sample_id},
            "sha256": agg,
        })

    n_single = int(round(config.single_effect_fraction * config.n_scenes))
    for i in range(config.n_scenes):
        scene_seed = config.base_seed + i
        rng = np.random.default_rng(np.random.SeedSequence([config.base_seed, 0xDA7A, i]))
        single = EFFECTS[i % len(EFFECTS)] if i < n_single else None
        s = sample_strengths(rng, single)
        spec = SceneSpec(seed=scene_seed, H=config.H, W=config.W, L=config.L,
                         camera_speed=config.camera_speed, fps=config.fps)
        pair = make_pair(spec, s, seed=scene_seed, params=config.effect_params,
                         sample_id=f"sim_{i:05d}")
        store(pair, split_of(scene_seed, config.split_mod), scene_seed, scene_seed)

    # Single-frame "generation" pool: per group, five strengths of one effect.
    for g in range(config.n_generation_groups):
        scene_seed = config.base_seed + 100_000 + g
        rng = np.random.default_rng(np.random.SeedSequence([config.base_seed, 0x6E4, g]))
        effect = EFFECTS[g % len(EFFECTS)]
        strengths = np.sort(0.1 + 0.9 * rng.random(5))
        spec = SceneSpec(seed=scene_seed, H=config.H, W=config.W, L=1,
                         camera_speed=config.camera_speed, fps=config.fps)
        clear, meta = render_clear(spec)
        for j, sv in enumerate(strengths):
            s = WeatherStrength(**{effect: float(sv)})
            weather = compose_effects(clear, meta, s, scene_seed, config.effect_params)
            pair = SamplePair(clear=clear, weather=weather, strengths=s,
                              source="generation", meta=meta,
                              sample_id=f"gen_{g:05d}_{j}")
            split = "train" if split_of(scene_seed, config.split_mod) == "pseudo_real" \
                else split_of(scene_seed, config.split_mod)
            store(pair, split, scene_seed, scene_seed)

    manifest = {
        "version": MANIFEST_VERSION,
        "config": config.to_dict(),
        "effect_params": config.effect_params.to_dict(),
        "samples": samples,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
