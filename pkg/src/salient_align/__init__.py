"""Visually salient landmark discovery and two-landmark image alignment."""

__version__ = "0.1.0"

from salient_align.errors import SalientAlignError
from salient_align.grids import (
    AnnotationSet,
    FeatureGrid,
    ImageMeta,
    SaliencyGrid,
    grid_to_pixel,
    read_grid,
    write_grid,
)
from salient_align.peaks import PeakConfig, extract_landmarks
from salient_align.registration import SimilarityTransform, fit_transform

__all__ = [
    "AnnotationSet",
    "FeatureGrid",
    "ImageMeta",
    "PeakConfig",
    "SaliencyGrid",
    "SalientAlignError",
    "SimilarityTransform",
    "extract_landmarks",
    "fit_transform",
    "grid_to_pixel",
    "read_grid",
    "write_grid",
]
