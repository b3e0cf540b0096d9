"""Unsupervised pixel segmentation of infrared sky images into cloud and clear sky.

Four segmenters share one estimator interface: :class:`KMeansSegmenter`,
:class:`GaussianMixtureSegmenter` and :class:`MRFSegmenter` (trained by
iterated conditional modes, with ICM or simulated-annealing inference).
"""

from .core import (
    CLEAR,
    CLOUD,
    ChronologyError,
    DataError,
    GaussianComponent,
    LabeledImage,
    LabelGrid,
    ManifestError,
    ModelFormatError,
    PixelGrid,
    TrainedModel,
    load_manifest,
    load_model,
    save_model,
)
from .features import FeatureExtractor, design_matrix
from .gmm import GaussianMixtureSegmenter
from .harness import benchmark, loo_cv, make_segmenter, synth_dataset
from .kmeans import KMeansSegmenter
from .metrics import j_statistic, lambda_search
from .mrf import MRFSegmenter

__version__ = "0.1.0"

__all__ = [
    "CLEAR",
    "CLOUD",
    "ChronologyError",
    "DataError",
    "FeatureExtractor",
    "GaussianComponent",
    "GaussianMixtureSegmenter",
    "KMeansSegmenter",
    "LabelGrid",
    "LabeledImage",
    "MRFSegmenter",
    "ManifestError",
    "ModelFormatError",
    "PixelGrid",
    "TrainedModel",
    "benchmark",
    "design_matrix",
    "j_statistic",
    "lambda_search",
    "load_manifest",
    "load_model",
    "loo_cv",
    "make_segmenter",
    "save_model",
    "synth_dataset",
]
