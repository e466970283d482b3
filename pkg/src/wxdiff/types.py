"""Shared data model: videos, strength vectors, latents, condition maps, sample pairs.

All array-backed types are immutable value objects: arrays are validated on
construction and flagged read-only, so instances are safe to share across
threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

# Fixed channel order of the strength vector. Everything downstream (condition
# maps, estimators, CLI parsing) relies on this order.
EFFECTS = ("cloud", "fog", "rain", "snow", "puddle", "snow_coverage")
N_EFFECTS = len(EFFECTS)

UNIT = "unit"      # storage domain, values in [0, 1]
SIGNED = "signed"  # model domain, values in [-1, 1]

_DOMAIN_RANGE = {UNIT: (0.0, 1.0), SIGNED: (-1.0, 1.0)}
_DOMAIN_TOL = 1e-6


class DomainError(ValueError):
    """Value or tag outside the declared pixel domain."""


class DimensionError(ValueError):
    """Array shape violates a divisibility or size requirement."""


class CodecError(ValueError):
    """Latent channel count inconsistent with any registered codec factor."""


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class VideoTensor:
    """An L x H x W x 3 frame stack in either the unit or signed pixel domain.

    H and W must additionally be divisible by the codec factor and the
    denoiser's downsampling factor; those checks happen where the factors are
    known (encode / network forward).
    """

    frames: np.ndarray
    domain_tag: str = UNIT
    fps: float = 8.0

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[3] != 3:
            raise DimensionError(f"expected (L,H,W,3) frames, got {f.shape}")
        if f.shape[0] < 1:
            raise DimensionError("need at least one frame (L >= 1)")
        if self.domain_tag not in _DOMAIN_RANGE:
            raise DomainError(f"unknown domain_tag {self.domain_tag!r}")
        lo, hi = _DOMAIN_RANGE[self.domain_tag]
        fmin, fmax = float(f.min()), float(f.max())
        if fmin < lo - _DOMAIN_TOL or fmax > hi + _DOMAIN_TOL:
            raise DomainError(
                f"values [{fmin:.4g}, {fmax:.4g}] outside {self.domain_tag} "
                f"domain [{lo}, {hi}]"
            )
        object.__setattr__(self, "frames", _freeze(f))

    @property
    def L(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[1]

    @property
    def W(self) -> int:
        return self.frames.shape[2]

    def with_frames(self, frames: np.ndarray) -> "VideoTensor":
        return replace(self, frames=frames)


@dataclass(frozen=True)
class WeatherStrength:
    """Six per-effect strengths, each in [0, 1]."""

    cloud: float = 0.0
    fog: float = 0.0
    rain: float = 0.0
    snow: float = 0.0
    puddle: float = 0.0
    snow_coverage: float = 0.0

    def __post_init__(self):
        for name in EFFECTS:
            v = float(getattr(self, name))
            if not (0.0 <= v <= 1.0) or not np.isfinite(v):
                raise ValueError(f"strength {name}={v} outside [0, 1]")
            object.__setattr__(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, e) for e in EFFECTS], dtype=np.float32)

    def as_dict(self) -> dict:
        return {e: getattr(self, e) for e in EFFECTS}

    @classmethod
    def from_array(cls, a: Sequence[float]) -> "WeatherStrength":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (N_EFFECTS,):
            raise ValueError(f"expected {N_EFFECTS} strengths, got shape {a.shape}")
        return cls(**dict(zip(EFFECTS, a.tolist())))

    @classmethod
    def from_dict(cls, d: dict) -> "WeatherStrength":
        unknown = set(d) - set(EFFECTS)
        if unknown:
            raise ValueError(f"unknown effects {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def zeros(cls) -> "WeatherStrength":
        return cls()

    @classmethod
    def ones(cls) -> "WeatherStrength":
        return cls(**{e: 1.0 for e in EFFECTS})

    @classmethod
    def clamped(cls, **kwargs) -> "WeatherStrength":
        return cls(**{k: min(1.0, max(0.0, float(v))) for k, v in kwargs.items()})

    def le(self, other: "WeatherStrength") -> bool:
        """Componentwise partial order."""
        return all(getattr(self, e) <= getattr(other, e) for e in EFFECTS)


@dataclass(frozen=True, eq=False)
class LatentTensor:
    """An l x h x w x C latent code plus the id of the codec that produced it."""

    code: np.ndarray
    codec_id: str

    def __post_init__(self):
        c = np.asarray(self.code)
        if c.ndim != 4:
            raise DimensionError(f"expected (l,h,w,C) code, got {c.shape}")
        object.__setattr__(self, "code", _freeze(c))

    @property
    def l(self) -> int:
        return self.code.shape[0]

    @property
    def h(self) -> int:
        return self.code.shape[1]

    @property
    def w(self) -> int:
        return self.code.shape[2]

    @property
    def C(self) -> int:
        return self.code.shape[3]


@dataclass(frozen=True, eq=False)
class ConditionMap:
    """Strength vector broadcast to every latent space-time site (l,h,w,6)."""

    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map)
        if m.ndim != 4 or m.shape[3] != N_EFFECTS:
            raise DimensionError(f"expected (l,h,w,{N_EFFECTS}) map, got {m.shape}")
        flat = m.reshape(-1, N_EFFECTS)
        if flat.shape[0] > 1 and np.max(np.abs(flat - flat[0])) > 0:
            raise ValueError("condition map must be constant across sites")
        object.__setattr__(self, "map", _freeze(m))

    @property
    def strengths(self) -> WeatherStrength:
        return WeatherStrength.from_array(self.map.reshape(-1, N_EFFECTS)[0])


@dataclass(frozen=True, eq=False)
class SceneMeta:
    """Per-clip geometry labels emitted by the procedural renderer.

    depth is in meters, per frame (L,H,W). Masks are boolean (L,H,W) and are
    already disjoint: overlap is resolved with priority objects > ground > sky,
    and the three masks partition every frame.
    """

    depth: np.ndarray
    sky_mask: np.ndarray
    ground_mask: np.ndarray
    object_mask: np.ndarray
    horizon_row: int
    object_masks: tuple = field(default_factory=tuple)  # per-object (L,H,W) bools

    def __post_init__(self):
        d = np.ascontiguousarray(self.depth, dtype=np.float32)
        if np.any(d <= 0):
            raise ValueError("depth must be strictly positive")
        d.flags.writeable = False
        object.__setattr__(self, "depth", d)
        for name in ("sky_mask", "ground_mask", "object_mask"):
            m = np.ascontiguousarray(getattr(self, name), dtype=bool)
            if m.shape != d.shape:
                raise DimensionError(f"{name} shape {m.shape} != depth {d.shape}")
            m.flags.writeable = False
            object.__setattr__(self, name, m)
        total = (self.sky_mask.astype(np.uint8) + self.ground_mask + self.object_mask)
        if not np.all(total == 1):
            raise ValueError("sky/ground/object masks must partition the frame")


@dataclass(frozen=True, eq=False)
class SamplePair:
    """A (clear, weather, strengths) training sample.

    clear is None for weather-only partial pairs (pseudo-real clips stored
    without their clear counterpart).
    """

    weather: VideoTensor
    strengths: WeatherStrength
    source: str  # simulation | generation | real_autolabeled
    clear: Optional[VideoTensor] = None
    meta: Optional[SceneMeta] = None
    sample_id: str = ""

    SOURCES = ("simulation", "generation", "real_autolabeled")

    def __post_init__(self):
        if self.source not in self.SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if self.clear is not None:
            a, b = self.clear, self.weather
            if (a.L, a.H, a.W) != (b.L, b.H, b.W):
                raise DimensionError(
                    f"clear {a.frames.shape} and weather {b.frames.shape} disagree"
                )

    @property
    def is_partial(self) -> bool:
        return self.clear is None
