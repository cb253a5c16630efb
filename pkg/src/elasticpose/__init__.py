"""Elastic weight-sharing pose networks with spatial-temporal architecture search."""

__version__ = "0.1.0"

from .genome import (
    FUSION_OPS,
    SearchSpace,
    SpatialGenome,
    StageRange,
    TemporalGenome,
    VideoGenome,
    corner,
    resnet50_space,
    sample_random,
    sample_temporal,
    sample_video,
    toy_space,
    validate,
)

__all__ = [
    "FUSION_OPS",
    "SearchSpace",
    "SpatialGenome",
    "StageRange",
    "TemporalGenome",
    "VideoGenome",
    "corner",
    "resnet50_space",
    "sample_random",
    "sample_temporal",
    "sample_video",
    "toy_space",
    "validate",
]
