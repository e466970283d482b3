"""Controllable weather synthesis and removal in videos.

Two complementary conditional video diffusion models (weather synthesis and
weather removal) trained on procedurally generated paired data, with an
analytic weather oracle that makes controllability and removal quality
quantitatively testable at desk scale.
"""

from .types import (
    EFFECTS,
    ConditionMap,
    LatentTensor,
    SamplePair,
    SceneMeta,
    VideoTensor,
    WeatherStrength,
)
from .codec import decode, encode, make_condition_map, to_signed, to_unit, wrap_image_as_video

__version__ = "0.1.0"

__all__ = [
    "EFFECTS", "ConditionMap", "LatentTensor", "SamplePair", "SceneMeta",
    "VideoTensor", "WeatherStrength",
    "decode", "encode", "make_condition_map", "to_signed", "to_unit",
    "wrap_image_as_video",
    "__version__",
]
