"""Apply a trained model to a clip: synthesize weather onto it or remove
weather from it. Weather *editing* is the documented two-step recipe: remove
first, then synthesize the new condition onto the result.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from .codec import decode_array, encode, to_signed
from .diffusion import Denoiser, NoiseSchedule, sample
from .training import load_checkpoint
from .types import VideoTensor, WeatherStrength

MODES = ("synthesize", "remove")
_STAGE_FOR_MODE = {"synthesize": ("synthesis_base", "synthesis_joint"),
                   "remove": ("removal_base",)}


class StageError(ValueError):
    """Checkpoint trained for a different pipeline stage."""


def edit_video(
    ckpt_path: Path,
    video: VideoTensor,
    s: WeatherStrength,
    mode: str,
    steps: int = 30,
    seed: int = 0,
    device: str = "cpu",
    use_ema: bool = True,
) -> VideoTensor:
    """Run one model pass on a unit-domain clip, returning a unit-domain clip."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    net, ema, manifest = load_checkpoint(ckpt_path)
    if manifest["stage"] not in _STAGE_FOR_MODE[mode]:
        raise StageError(
            f"mode {mode!r} needs a checkpoint from stage "
            f"{_STAGE_FOR_MODE[mode]}, got {manifest['stage']!r}"
        )
    model = (ema if use_ema else net).to(device).eval()
    denoiser = Denoiser(model, NoiseSchedule.from_dict(manifest["schedule"]))
    factor = int(manifest["codec_factor"])
    cond = encode(to_signed(video), factor)
    out = sample(denoiser, cond, s, steps=steps, seed=seed, device=device)
    frames = decode_array(out.code, factor)
    return VideoTensor(frames=np.clip((frames + 1.0) * 0.5, 0.0, 1.0),
                       domain_tag="unit", fps=video.fps)
