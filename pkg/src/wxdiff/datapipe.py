"""Dataset access, the generation-source consistency filter, and batch
sampling that mixes sources, frame lengths, and resolutions.

The filter scores candidate pairs by the cosine between their clear->weather
embedding difference and a per-effect direction estimated from trusted
simulation pairs, then keeps the top ceil(p*N); p defaults to 0.04. The
embedder is pluggable; the default is a handcrafted 112-dim feature
(8x8 average-pooled grayscale + per-channel 16-bin color histograms,
L2-normalized).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .types import EFFECTS, SamplePair, VideoTensor
from .videoio import read_pair

DEFAULT_TOP_P = 0.04


class ConfigurationError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


# --- embedding ---------------------------------------------------------------

def _pool_gray(frame: np.ndarray, g: int = 8) -> np.ndarray:
    gray = frame @ np.array([0.299, 0.587, 0.114])
    rows = np.array_split(gray, g, axis=0)
    cells = [np.array_split(r, g, axis=1) for r in rows]
    return np.array([[c.mean() for c in row] for row in cells]).ravel()


def _color_hist(frame: np.ndarray, bins: int = 16) -> np.ndarray:
    h = [np.histogram(frame[..., c], bins=bins, range=(0.0, 1.0))[0] for c in range(3)]
    h = np.concatenate(h).astype(np.float64)
    return h / frame[..., 0].size


class HandcraftedEmbedder:
    """Default frame/video embedder: 64 pooled-gray dims + 48 histogram dims."""

    id = "handcrafted-112:v1"
    dim = 112

    def embed_frame(self, frame: np.ndarray) -> np.ndarray:
        v = np.concatenate([_pool_gray(frame), _color_hist(frame)])
        n = np.linalg.norm(v)
        return v / n if n > 0 else v

    def embed(self, video: VideoTensor) -> np.ndarray:
        v = np.mean([self.embed_frame(f) for f in video.frames], axis=0)
        n = np.linalg.norm(v)
        return v / n if n > 0 else v


@dataclass(frozen=True)
class PairEmbedding:
    clear_vec: np.ndarray
    weather_vec: np.ndarray

    def __post_init__(self):
        for name in ("clear_vec", "weather_vec"):
            v = np.asarray(getattr(self, name), dtype=np.float64)
            if abs(np.linalg.norm(v) - 1.0) > 1e-6:
                raise ValueError(f"{name} must be unit norm")
            object.__setattr__(self, name, v)

    @property
    def difference(self) -> np.ndarray:
        return self.weather_vec - self.clear_vec


def embed_pair(pair: SamplePair, embedder=None) -> PairEmbedding:
    embedder = embedder or HandcraftedEmbedder()
    if pair.clear is None:
        raise ValueError("cannot embed a weather-only pair")
    return PairEmbedding(
        clear_vec=embedder.embed(pair.clear),
        weather_vec=embedder.embed(pair.weather),
    )


# --- top-p consistency filter ------------------------------------------------

def effect_direction(reference_pairs: Sequence[SamplePair], embedder=None) -> np.ndarray:
    """Mean clear->weather embedding shift over trusted pairs, normalized."""
    if len(reference_pairs) == 0:
        raise ConfigurationError("empty reference set for effect direction")
    diffs = [embed_pair(p, embedder).difference for p in reference_pairs]
    e = np.mean(diffs, axis=0)
    n = np.linalg.norm(e)
    if n == 0:
        raise ConfigurationError("reference pairs have zero mean embedding shift")
    return e / n


def consistency_score(pair: SamplePair, direction: np.ndarray, embedder=None) -> float:
    d = embed_pair(pair, embedder).difference
    n = np.linalg.norm(d)
    if n == 0:
        return 0.0  # degenerate pair (weather == clear) scores 0 by convention
    return float(d @ direction / n)


def pair_filter_topk(
    pairs: Sequence[SamplePair],
    effect: str,
    p: float = DEFAULT_TOP_P,
    reference_pairs: Sequence[SamplePair] = (),
    embedder=None,
    report_path: Optional[Path] = None,
) -> list[SamplePair]:
    """Keep the top ceil(p*N) pairs by directional consistency.

    Deterministic and order-invariant: ties are broken by sample id
    ascending. The kept list is ordered by descending score.
    """
    if effect not in EFFECTS:
        raise ValueError(f"unknown effect {effect!r}")
    if not (0.0 < p <= 1.0):
        raise ValueError(f"top fraction p={p} outside (0, 1]")
    embedder = embedder or HandcraftedEmbedder()
    direction = effect_direction(reference_pairs, embedder)
    scored = [(consistency_score(q, direction, embedder), q.sample_id, q) for q in pairs]
    scored.sort(key=lambda t: (-t[0], t[1]))
    k = math.ceil(p * len(pairs))
    kept = scored[:k]
    if report_path is not None:
        report = {
            "effect": effect,
            "p": p,
            "embedder": embedder.id,
            "n_candidates": len(pairs),
            "n_kept": k,
            "kept_ids": [sid for _, sid, _ in kept],
            "scores": {sid: sc for sc, sid, _ in scored},
        }
        Path(report_path).write_text(json.dumps(report, indent=1, sort_keys=True))
    return [q for _, _, q in kept]


# --- dataset handles ---------------------------------------------------------

@dataclass
class Dataset:
    """In-memory view of an emitted dataset plus its manifest."""

    samples: list
    manifest: dict

    @property
    def manifest_hash(self) -> str:
        import hashlib
        return hashlib.sha256(
            json.dumps(self.manifest, sort_keys=True).encode()
        ).hexdigest()

    def by_source(self, source: str) -> list:
        return [s for s in self.samples if s.source == source]


def load_dataset(
    manifest_path: Path,
    splits: Sequence[str] = ("train",),
    sources: Optional[Sequence[str]] = None,
    full_pairs_only: bool = True,
    verify: bool = True,
) -> Dataset:
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    samples = []
    for entry in manifest["samples"]:
        if entry["split"] not in splits:
            continue
        if sources is not None and entry["source"] not in sources:
            continue
        pair = read_pair(root / entry["paths"]["dir"], verify=verify)
        if full_pairs_only and pair.is_partial:
            continue
        samples.append(pair)
    return Dataset(samples=samples, manifest=manifest)


# --- batch sampling ----------------------------------------------------------

@dataclass(frozen=True)
class BatchSpec:
    batch_size: int = 8
    frame_lengths: tuple = (1, 2, 4, 8)
    resolutions: tuple = (32,)     # square targets; (H, W) tuples also accepted
    source_weights: dict = field(default_factory=lambda: {"simulation": 1.0})

    def __post_init__(self):
        w = sum(self.source_weights.values())
        if abs(w - 1.0) > 1e-9:
            raise ConfigurationError(f"source weights sum to {w}, expected 1")
        if any(v < 0 for v in self.source_weights.values()):
            raise ConfigurationError("source weights must be non-negative")


@dataclass
class Batch:
    """Shape-homogeneous training batch in the unit storage domain."""

    clear: np.ndarray      # (B, L, H, W, 3)
    weather: np.ndarray    # (B, L, H, W, 3)
    strengths: np.ndarray  # (B, 6)
    sources: list

    @property
    def L(self) -> int:
        return self.clear.shape[1]


def bilinear_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize (L, H, W, C) frames; half-pixel-centered sampling."""
    L, H, W, C = frames.shape
    ys = np.clip((np.arange(out_h) + 0.5) * H / out_h - 0.5, 0, H - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * W / out_w - 0.5, 0, W - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    fy = (ys - y0)[None, :, None, None]
    fx = (xs - x0)[None, None, :, None]
    a = frames[:, y0][:, :, x0]
    b = frames[:, y0][:, :, x1]
    c = frames[:, y1][:, :, x0]
    d = frames[:, y1][:, :, x1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def _resize_crop(frames: np.ndarray, th: int, tw: int, rng: np.random.Generator) -> np.ndarray:
    # Bilinear to 1.15x target, then random crop: simple and scale-robust.
    rh, rw = int(round(1.15 * th)), int(round(1.15 * tw))
    r = bilinear_resize(frames, rh, rw)
    oy = int(rng.integers(0, rh - th + 1))
    ox = int(rng.integers(0, rw - tw + 1))
    return r[:, oy:oy + th, ox:ox + tw]


def sample_batch(
    datasets: dict,
    spec: BatchSpec,
    rng: np.random.Generator,
    max_retries: int = 100,
) -> Batch:
    """Draw one shape-homogeneous batch.

    Sources are drawn by spec weights; for L > 1 the draw is renormalized
    over sources that actually hold clips of length >= L (the single-frame
    generation pool only serves L = 1 batches). Deterministic given rng
    state.
    """
    for source, wgt in spec.source_weights.items():
        if wgt > 0 and not datasets.get(source):
            raise ConfigurationError(f"source {source!r} has weight {wgt} but no data")

    L = int(rng.choice(np.asarray(spec.frame_lengths)))
    res = spec.resolutions[int(rng.integers(0, len(spec.resolutions)))]
    th, tw = (res, res) if np.isscalar(res) else res

    names = sorted(k for k, v in spec.source_weights.items() if v > 0)
    usable = [n for n in names if any(p.weather.L >= L for p in datasets[n])]
    if not usable:
        raise SamplingError(f"no source holds clips of length >= {L}")
    w = np.array([spec.source_weights[n] for n in usable], dtype=np.float64)
    w /= w.sum()

    clears, weathers, strengths, sources = [], [], [], []
    for _ in range(spec.batch_size):
        source = usable[int(rng.choice(len(usable), p=w))]
        pool = datasets[source]
        pair = None
        for _ in range(max_retries):
            cand = pool[int(rng.integers(0, len(pool)))]
            if cand.weather.L >= L and not cand.is_partial:
                pair = cand
                break
        if pair is None:
            raise SamplingError(f"could not draw a length-{L} clip from {source!r}")
        t0 = int(rng.integers(0, pair.weather.L - L + 1))
        cw = pair.weather.frames[t0:t0 + L]
        cc = pair.clear.frames[t0:t0 + L]
        # One offset stream for both sides so crops stay aligned.
        state = rng.integers(0, 2**63 - 1)
        weathers.append(_resize_crop(cw, th, tw, np.random.default_rng(state)))
        clears.append(_resize_crop(cc, th, tw, np.random.default_rng(state)))
        strengths.append(pair.strengths.as_array())
        sources.append(source)

    return Batch(
        clear=np.stack(clears).astype(np.float32),
        weather=np.stack(weathers).astype(np.float32),
        strengths=np.stack(strengths).astype(np.float32),
        sources=sources,
    )
