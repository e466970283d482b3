"""On-disk clip and sample-pair layout.

A clip is a directory of zero-padded frame files `frame_%05d.png` (8-bit RGB)
plus a `meta.json` with L, H, W, fps, domain (always "unit" on disk),
strengths when labeled, and the source tag.

A sample pair is a directory holding `weather/` (always) and `clear/`
(absent for weather-only pseudo-real samples), optional `depth/` and `masks/`
for simulation samples, a pair-level `meta.json`, and `checksums.json` with
per-file sha256 digests that are verified on read.

Depth is 16-bit grayscale PNG with depth_m = pixel / 256; sky pixels store
the sentinel 65535 and read back as the renderer's sky depth (1000 m).
Object masks are 8-bit {0, 255} PNGs; sky and ground masks are derived from
the stored horizon row.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .procsim.scene import D_SKY
from .types import SamplePair, SceneMeta, VideoTensor, WeatherStrength

DEPTH_SCALE = 256.0
DEPTH_SENTINEL = 65535


class CorruptionError(IOError):
    """A stored file does not match its recorded checksum."""


def quantize_unit(frames: np.ndarray) -> np.ndarray:
    """Snap unit-domain values to the 8-bit grid so disk roundtrips are exact."""
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0).astype(np.float32) / 255.0


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_clip(path: Path, video: VideoTensor, **meta) -> list[Path]:
    """Write one clip directory; returns the files written."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if video.domain_tag != "unit":
        raise ValueError("clips are stored in the unit domain")
    written = []
    u8 = np.round(video.frames * 255.0).astype(np.uint8)
    for i in range(video.L):
        p = path / f"frame_{i:05d}.png"
        Image.fromarray(u8[i], mode="RGB").save(p)
        written.append(p)
    doc = {
        "L": video.L, "H": video.H, "W": video.W,
        "fps": video.fps, "domain": "unit",
    }
    doc.update(meta)
    mp = path / "meta.json"
    mp.write_text(json.dumps(doc, indent=1, sort_keys=True))
    written.append(mp)
    return written


def read_clip(path: Path) -> tuple[VideoTensor, dict]:
    path = Path(path)
    meta = json.loads((path / "meta.json").read_text())
    frames = []
    for i in range(int(meta["L"])):
        img = Image.open(path / f"frame_{i:05d}.png").convert("RGB")
        frames.append(np.asarray(img, dtype=np.float32) / 255.0)
    video = VideoTensor(frames=np.stack(frames), domain_tag="unit", fps=float(meta.get("fps", 8.0)))
    return video, meta


def _write_depth(path: Path, depth: np.ndarray) -> None:
    px = np.round(depth * DEPTH_SCALE)
    px = np.where(depth >= D_SKY, DEPTH_SENTINEL, np.minimum(px, DEPTH_SENTINEL - 1))
    Image.fromarray(px.astype(np.uint16)).save(path)


def _read_depth(path: Path) -> np.ndarray:
    px = np.asarray(Image.open(path), dtype=np.float64)
    return np.where(px >= DEPTH_SENTINEL, D_SKY, px / DEPTH_SCALE).astype(np.float32)


def _write_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def _read_mask(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path)) > 127


def write_pair(path: Path, pair: SamplePair, extra_meta: Optional[dict] = None) -> dict:
    """Write a sample pair; returns {relative path: sha256} of payload files."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files: list[Path] = []
    strengths = pair.strengths.as_dict()
    files += write_clip(path / "weather", pair.weather, strengths=strengths, source=pair.source)
    if pair.clear is not None:
        files += write_clip(path / "clear", pair.clear, strengths=None, source=pair.source)
    if pair.meta is not None:
        dd = path / "depth"
        md = path / "masks"
        dd.mkdir(exist_ok=True)
        md.mkdir(exist_ok=True)
        for t in range(pair.meta.depth.shape[0]):
            dp = dd / f"depth_{t:05d}.png"
            _write_depth(dp, pair.meta.depth[t])
            mp = md / f"obj_{t:05d}.png"
            _write_mask(mp, pair.meta.object_mask[t])
            files += [dp, mp]
    doc = {
        "sample_id": pair.sample_id,
        "source": pair.source,
        "strengths": strengths,
        "has_clear": pair.clear is not None,
        "has_meta": pair.meta is not None,
        "horizon_row": pair.meta.horizon_row if pair.meta is not None else None,
    }
    if extra_meta:
        doc.update(extra_meta)
    (path / "meta.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    checks = {str(p.relative_to(path)): sha256_file(p) for p in files}
    (path / "checksums.json").write_text(json.dumps(checks, indent=1, sort_keys=True))
    return checks


def read_pair(path: Path, verify: bool = True) -> SamplePair:
    """Read a sample pair back, verifying checksums of every payload file."""
    path = Path(path)
    doc = json.loads((path / "meta.json").read_text())
    if verify:
        checks = json.loads((path / "checksums.json").read_text())
        for rel, digest in checks.items():
            p = path / rel
            if not p.exists():
                raise CorruptionError(f"missing file {rel} in {path}")
            if sha256_file(p) != digest:
                raise CorruptionError(f"checksum mismatch for {rel} in {path}")
    weather, _ = read_clip(path / "weather")
    clear = None
    if doc.get("has_clear"):
        clear, _ = read_clip(path / "clear")
    meta = None
    if doc.get("has_meta"):
        L = weather.L
        depth = np.stack([_read_depth(path / "depth" / f"depth_{t:05d}.png") for t in range(L)])
        obj = np.stack([_read_mask(path / "masks" / f"obj_{t:05d}.png") for t in range(L)])
        horizon = int(doc["horizon_row"])
        rows = np.arange(weather.H)[None, :, None]
        meta = SceneMeta(
            depth=depth,
            sky_mask=(rows < horizon) & ~obj,
            ground_mask=(rows >= horizon) & ~obj,
            object_mask=obj,
            horizon_row=horizon,
        )
    return SamplePair(
        weather=weather,
        clear=clear,
        strengths=WeatherStrength.from_dict(doc["strengths"]),
        source=doc["source"],
        meta=meta,
        sample_id=doc.get("sample_id", path.name),
    )
