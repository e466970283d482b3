from .scene import SceneSpec, render_clear, horizon_row, ground_depth_profile, D_SKY
from .effects import (
    COMPOSE_ORDER,
    EffectParams,
    apply_effect,
    compose_effects,
    luminance,
    puddle_mask,
    rain_particles,
    snow_particles,
)
from .dataset import DatasetConfig, emit_dataset, make_pair, sample_strengths, split_of

__all__ = [
    "SceneSpec", "render_clear", "horizon_row", "ground_depth_profile", "D_SKY",
    "COMPOSE_ORDER", "EffectParams", "apply_effect", "compose_effects",
    "luminance", "puddle_mask", "rain_particles", "snow_particles",
    "DatasetConfig", "emit_dataset", "make_pair", "sample_strengths", "split_of",
]
