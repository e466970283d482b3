import json
import math
from pathlib import Path

import numpy as np
import pytest

from wxdiff.procsim import (
    COMPOSE_ORDER,
    DatasetConfig,
    EffectParams,
    SceneSpec,
    apply_effect,
    compose_effects,
    emit_dataset,
    luminance,
    make_pair,
    puddle_mask,
    rain_particles,
    render_clear,
    snow_particles,
    split_of,
)
from wxdiff.types import EFFECTS, SceneMeta, VideoTensor, WeatherStrength

P = EffectParams()


# --- clear rendering ----------------------------------------------------------

def test_render_deterministic():
    spec = SceneSpec(seed=7, H=32, W=32, L=8)
    a, _ = render_clear(spec)
    b, _ = render_clear(spec)
    assert a.frames.tobytes() == b.frames.tobytes()


def test_render_rejects_tiny():
    with pytest.raises(Exception):
        render_clear(SceneSpec(seed=1, H=8, W=8, L=1))


def test_masks_partition(small_scene):
    _, _, meta = small_scene
    total = meta.sky_mask.astype(int) + meta.ground_mask + meta.object_mask
    assert np.all(total == 1)


def test_sky_region_construction(small_scene):
    # sky mask plus object pixels above the horizon tile the rows < horizon exactly
    _, video, meta = small_scene
    H = video.H
    rows = np.arange(H)[None, :, None]
    above = np.broadcast_to(rows < meta.horizon_row, meta.sky_mask.shape)
    union = meta.sky_mask | (meta.object_mask & above)
    assert np.array_equal(union, above)
    assert meta.horizon_row == round(0.55 * H)
    assert meta.sky_mask.mean() <= meta.horizon_row / H + 1.0 / H


def test_depth_positive_and_sky_far(small_scene):
    _, _, meta = small_scene
    assert np.all(meta.depth > 0)
    assert np.all(meta.depth[meta.sky_mask] == 1000.0)


def test_parallax_formula():
    # per-frame shift = camera_speed / depth
    assert 4.0 / 10.0 == pytest.approx(0.4)
    assert 4.0 / 40.0 == pytest.approx(0.1)


def test_parallax_matches_rendered_motion():
    spec = SceneSpec(seed=21, H=48, W=48, L=8, camera_speed=4.0)
    _, meta = render_clear(spec)
    checked = 0
    for om in meta.object_masks:
        if om.sum(axis=(1, 2)).min() < 25:
            continue
        if om[:, :, 0].any() or om[:, :, -1].any():
            continue  # clipped at a border; its COM drift is not the physical shift
        d = float(np.median(meta.depth[0][om[0]]))
        coms = [np.argwhere(om[t]).mean(axis=0)[1] for t in range(spec.L)]
        slope = np.polyfit(np.arange(spec.L), coms, 1)[0]
        assert slope == pytest.approx(-spec.camera_speed / d, abs=0.15)
        checked += 1
    assert checked >= 1


# --- effect identities and formulas --------------------------------------------

@pytest.mark.parametrize("effect", EFFECTS)
def test_zero_strength_identity(small_scene, effect):
    _, video, meta = small_scene
    out = apply_effect(video, meta, effect, 0.0, seed=3)
    assert out.frames.tobytes() == video.frames.tobytes()


@pytest.mark.parametrize("effect", EFFECTS)
def test_effects_stay_in_unit_range(small_scene, effect):
    _, video, meta = small_scene
    out = apply_effect(video, meta, effect, 1.0, seed=3)
    assert out.frames.min() >= 0.0 and out.frames.max() <= 1.0


def test_fog_hand_value():
    # gray 0.6 at depth 10 m, s = 0.5: t = exp(-0.4), out = t*0.6 + (1-t)*0.78
    frames = np.full((1, 16, 16, 3), 0.6)
    meta = SceneMeta(
        depth=np.full((1, 16, 16), 10.0),
        sky_mask=np.zeros((1, 16, 16), bool),
        ground_mask=np.ones((1, 16, 16), bool),
        object_mask=np.zeros((1, 16, 16), bool),
        horizon_row=0,
    )
    video = VideoTensor(frames=frames, domain_tag="unit")
    out = apply_effect(video, meta, "fog", 0.5, seed=0)
    t = math.exp(-0.08 * 0.5 * 10.0)
    assert t == pytest.approx(0.6703, abs=1e-4)
    assert out.frames[0, 0, 0, 0] == pytest.approx(t * 0.6 + (1 - t) * 0.78, abs=1e-6)
    assert out.frames[0, 0, 0, 0] == pytest.approx(0.6593, abs=1e-3)


def test_fog_monotone_transmission_and_contrast(small_scene):
    _, video, meta = small_scene
    grid = [0.0, 0.25, 0.5, 0.75, 1.0]
    mean_t = [np.mean(np.exp(-P.beta_max * s * meta.depth)) for s in grid]
    assert all(a > b for a, b in zip(mean_t, mean_t[1:]))
    contrast = []
    for s in grid:
        out = apply_effect(video, meta, "fog", s, seed=3)
        contrast.append(np.mean(np.std(luminance(out.frames), axis=(1, 2))))
    assert all(a >= b - 1e-9 for a, b in zip(contrast, contrast[1:]))


def test_rain_count_formula():
    assert P.n_rain(64, 64, 1.0) == 16  # round(0.004 * 4096)
    for s in (0.1, 0.33, 0.5, 1.0):
        pos = rain_particles(64, 64, 4, s, seed=9, p=P)
        assert pos.shape[1] == round(s * 0.004 * 64 * 64)


def test_snow_count_formula():
    for s in (0.2, 0.7, 1.0):
        pos = snow_particles(32, 32, 4, s, seed=9, p=P)
        assert pos.shape[1] == round(s * 0.006 * 32 * 32)


def test_rain_advection_wraps():
    pos = rain_particles(32, 32, 6, 1.0, seed=5, p=P)
    # anchors fall 0.3 * H per frame modulo H
    expect = (pos[0, :, 0] + 0.3 * 32) % 32
    assert np.allclose(pos[1, :, 0], expect)
    assert np.allclose(pos[1, :, 1], pos[0, :, 1])  # x fixed per streak


def test_puddle_coverage_exact(small_scene):
    _, video, meta = small_scene
    H = video.H
    plane_px = (H - meta.horizon_row) * video.W
    for s in (0.1, 0.37, 0.5, 0.93):
        m = puddle_mask(meta, s, seed=5)
        assert m.sum() == int(np.floor(s * plane_px))
        assert abs(m.sum() / plane_px - s) <= 1.0 / plane_px


def test_snow_coverage_whitens_ground(small_scene):
    _, video, meta = small_scene
    out = apply_effect(video, meta, "snow_coverage", 1.0, seed=3)
    gm = meta.ground_mask
    assert luminance(out.frames)[gm].mean() > luminance(video.frames)[gm].mean() + 0.1
    # sky pixels untouched
    assert np.allclose(out.frames[meta.sky_mask], video.frames[meta.sky_mask], atol=1e-7)


def test_cloud_estimable_luminance_drop(small_scene):
    _, video, meta = small_scene
    s = 0.6
    out = apply_effect(video, meta, "cloud", s, seed=3)
    nonsky = ~meta.sky_mask
    lw = luminance(out.frames)[nonsky].mean()
    lc = luminance(video.frames)[nonsky].mean()
    assert (1 - lw / lc) / P.cloud_dim == pytest.approx(s, abs=0.01)


# --- composition ----------------------------------------------------------------

def test_compose_zero_identity(small_scene):
    _, video, meta = small_scene
    out = compose_effects(video, meta, WeatherStrength.zeros(), seed=3)
    assert out.frames.tobytes() == video.frames.tobytes()


def test_compose_single_effect_consistency(small_scene):
    _, video, meta = small_scene
    a = compose_effects(video, meta, WeatherStrength(fog=0.5), seed=3)
    b = apply_effect(video, meta, "fog", 0.5, seed=3)
    assert np.array_equal(a.frames, b.frames)


def test_compose_order_is_fixed():
    assert COMPOSE_ORDER == ("cloud", "snow_coverage", "puddle", "fog", "rain", "snow")


def test_rain_composited_after_fog(small_scene):
    # streaks must sit on top of the fog layer: away from streaks the output
    # equals the dimmed fog image exactly; at streak cores it is brighter.
    _, video, meta = small_scene
    fog_only = compose_effects(video, meta, WeatherStrength(fog=1.0), seed=3)
    both = compose_effects(video, meta, WeatherStrength(fog=1.0, rain=1.0), seed=3)
    dimmed = fog_only.frames * (1.0 - P.rain_dim)
    diff = both.frames - dimmed
    assert diff.max() > 0.04          # visible streak core above the fog
    assert np.median(np.abs(diff)) < 1e-6  # non-streak pixels: exact dimmed fog


def test_full_determinism(small_scene):
    spec, video, meta = small_scene
    s = WeatherStrength(cloud=0.3, fog=0.6, rain=0.8, snow=0.5, puddle=0.4, snow_coverage=0.7)
    a = compose_effects(video, meta, s, seed=11)
    b = compose_effects(video, meta, s, seed=11)
    assert a.frames.tobytes() == b.frames.tobytes()


def test_apply_effect_validation(small_scene):
    _, video, meta = small_scene
    with pytest.raises(ValueError, match="unknown effect"):
        apply_effect(video, meta, "hail", 0.5, seed=1)
    with pytest.raises(ValueError, match="outside"):
        apply_effect(video, meta, "fog", 1.5, seed=1)


# --- pairs and datasets -----------------------------------------------------------

def test_make_pair_contract():
    spec = SceneSpec(seed=42, H=32, W=32, L=4)
    s = WeatherStrength(fog=0.5, rain=0.3)
    pair = make_pair(spec, s, seed=42)
    clear, _ = render_clear(spec)
    assert np.array_equal(pair.clear.frames, clear.frames)
    assert pair.strengths == s
    assert pair.source == "simulation"
    assert pair.meta is not None


def test_emit_dataset_roundtrip(tmp_path):
    cfg = DatasetConfig(out_dir=str(tmp_path / "d1"), n_scenes=6,
                        n_generation_groups=1, H=32, W=32, L=4)
    m1 = emit_dataset(cfg)
    n_sim = sum(1 for s in m1["samples"] if s["source"] == "simulation")
    n_gen = sum(1 for s in m1["samples"] if s["source"] == "generation")
    assert n_sim == 6
    assert n_gen == 5  # five strengths per generation group
    assert (tmp_path / "d1" / "manifest.json").exists()
    assert len(list((tmp_path / "d1").glob("sim_*"))) == 6

    cfg2 = DatasetConfig(**{**cfg.to_dict(), "out_dir": str(tmp_path / "d2"),
                            "effect_params": cfg.effect_params})
    m2 = emit_dataset(cfg2)
    assert [s["sha256"] for s in m1["samples"]] == [s["sha256"] for s in m2["samples"]]


def test_pseudo_real_split_has_no_clear(tmp_path):
    cfg = DatasetConfig(out_dir=str(tmp_path), n_scenes=16,
                        n_generation_groups=0, H=32, W=32, L=4)
    manifest = emit_dataset(cfg)
    pseudo = [s for s in manifest["samples"] if s["split"] == "pseudo_real"]
    assert pseudo, "expected at least one pseudo_real clip at this seed"
    for s in pseudo:
        d = tmp_path / s["paths"]["dir"]
        assert not (d / "clear").exists()
        assert (d / "weather").exists()
        meta = json.loads((d / "meta.json").read_text())
        assert meta["has_clear"] is False
    for s in manifest["samples"]:
        if s["split"] != "pseudo_real":
            assert (tmp_path / s["paths"]["dir"] / "clear").exists()


def test_split_assignment_deterministic():
    assert all(split_of(seed) == split_of(seed) for seed in range(50))
    tags = {split_of(seed) for seed in range(200)}
    assert tags == {"train", "val", "pseudo_real"}


def test_single_effect_fraction(tmp_path):
    cfg = DatasetConfig(out_dir=str(tmp_path), n_scenes=8, n_generation_groups=0,
                        H=32, W=32, L=2, single_effect_fraction=0.25)
    manifest = emit_dataset(cfg)
    sims = [s for s in manifest["samples"] if s["source"] == "simulation"]
    n_single = sum(1 for s in sims
                   if sum(v > 0 for v in s["strengths"].values()) == 1)
    assert n_single >= round(0.25 * len(sims))
