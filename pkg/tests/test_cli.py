import json

import numpy as np
import pytest

from wxdiff.cli import build_parser, dispatch, parse_strengths
from wxdiff.procsim import SceneSpec, render_clear
from wxdiff.videoio import read_clip, write_clip


# --- strengths grammar -----------------------------------------------------------

def test_parse_strengths_basic():
    s = parse_strengths("fog=0.8,rain=0.3")
    assert s.fog == 0.8 and s.rain == 0.3
    assert s.cloud == s.snow == s.puddle == s.snow_coverage == 0.0


def test_parse_strengths_all_alias():
    s = parse_strengths("all=1")
    assert all(v == 1.0 for v in s.as_dict().values())
    s = parse_strengths("all=0.5,fog=0.9")
    assert s.fog == 0.9 and s.rain == 0.5


def test_parse_strengths_clamps(caplog):
    s = parse_strengths("fog=1.7")
    assert s.fog == 1.0
    s = parse_strengths("rain=-0.2")
    assert s.rain == 0.0


def test_parse_strengths_rejects_unknown():
    with pytest.raises(ValueError, match="unknown effect"):
        parse_strengths("sleet=0.4")
    with pytest.raises(ValueError, match="bad strength"):
        parse_strengths("fog")


# --- exit codes --------------------------------------------------------------------

def test_usage_error_exits_2():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["edit", "--bogus-flag"])
    assert exc.value.code == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["transmogrify"])
    assert exc.value.code == 2


def test_validation_failure_exits_1(tmp_path, small_scene, synthesis_ckpt):
    _, video, _ = small_scene
    clip_dir = tmp_path / "clip"
    write_clip(clip_dir, video)
    # removal mode with a synthesis checkpoint: stage error -> exit 1
    code = dispatch(["edit", "--mode", "remove", "--ckpt", str(synthesis_ckpt.path),
                     "--video", str(clip_dir), "--strengths", "all=1",
                     "--steps", "2", "--out", str(tmp_path / "out")])
    assert code == 1


# --- subcommands ---------------------------------------------------------------------

def test_gen_data_command(tmp_path):
    out = tmp_path / "data"
    code = dispatch(["gen-data", "--out", str(out), "--seed", "99",
                     "--set", "n_scenes=4", "--set", "n_generation_groups=0",
                     "--set", "L=2"])
    assert code == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["samples"]) == 4
    snap = json.loads((out / "effective_config.json").read_text())
    assert snap["config"]["n_scenes"] == 4
    assert snap["config"]["base_seed"] == 99


def test_edit_command_synthesize(tmp_path, small_scene, synthesis_ckpt):
    _, video, _ = small_scene
    clip_dir = tmp_path / "clip"
    write_clip(clip_dir, video)
    out = tmp_path / "edited"
    code = dispatch(["edit", "--mode", "synthesize", "--ckpt", str(synthesis_ckpt.path),
                     "--video", str(clip_dir), "--strengths", "fog=0.8,rain=0.3",
                     "--steps", "2", "--seed", "1", "--out", str(out)])
    assert code == 0
    edited, meta = read_clip(out / "clip")
    assert edited.frames.shape == video.frames.shape
    assert meta["strengths"]["fog"] == 0.8
    assert meta["strengths"]["cloud"] == 0.0
    snap = json.loads((out / "effective_config.json").read_text())
    assert snap["command"] == "edit"


def test_edit_command_remove_all(tmp_path, small_scene, removal_ckpt):
    _, video, _ = small_scene
    clip_dir = tmp_path / "clip"
    write_clip(clip_dir, video)
    out = tmp_path / "removed"
    code = dispatch(["edit", "--mode", "remove", "--ckpt", str(removal_ckpt.path),
                     "--video", str(clip_dir), "--strengths", "all=1",
                     "--steps", "2", "--out", str(out)])
    assert code == 0
    assert (out / "clip" / "frame_00000.png").exists()


def test_edit_deterministic_per_seed(tmp_path, small_scene, removal_ckpt):
    _, video, _ = small_scene
    clip_dir = tmp_path / "clip"
    write_clip(clip_dir, video)
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        dispatch(["edit", "--mode", "remove", "--ckpt", str(removal_ckpt.path),
                  "--video", str(clip_dir), "--strengths", "all=1",
                  "--steps", "2", "--seed", "7", "--out", str(out)])
        outs.append(read_clip(out / "clip")[0].frames)
    assert np.array_equal(outs[0], outs[1])


def test_eval_and_plot_commands(tmp_path, micro_data, removal_ckpt):
    report = tmp_path / "report.json"
    code = dispatch(["eval", "--mode", "removal", "--ckpt", str(removal_ckpt.path),
                     "--data", str(micro_data / "manifest.json"),
                     "--effect", "fog", "--steps", "2", "--max-clips", "2",
                     "--out", str(report)])
    assert code == 0
    doc = json.loads(report.read_text())
    assert doc["aggregates"]["n_clips"] >= 1
    assert "psnr_gain" in doc["rows"][0]

    plots = tmp_path / "plots"
    code = dispatch(["plot", "--report", str(report), "--out", str(plots)])
    assert code == 0
    assert (plots / "metrics_bar.png").exists()


def test_train_command_micro(tmp_path, micro_data):
    out = tmp_path / "run"
    code = dispatch(["train", "--stage", "removal_base",
                     "--data", str(micro_data / "manifest.json"),
                     "--out", str(out), "--seed", "3",
                     "--set", "steps=3", "--set", "batch_size=2",
                     "--set", 'frame_lengths=[1,2]'])
    assert code == 0
    assert (out / "ckpt.pt").exists()
    manifest = json.loads((out / "ckpt_manifest.json").read_text())
    assert manifest["stage"] == "removal_base"
    assert manifest["step"] == 3
    snap = json.loads((out / "effective_config.json").read_text())
    assert snap["config"]["steps"] == 3
