"""canonalign: joint alignment of small image collections.

Trains a per-collection network mapping every pixel into a shared learned
canonical grid, then serves keypoint transfer, dense warping, and
cycle-consistency metrics from that canonical space.
"""

from .collection import (FeatureMap, ImageCollection, KeypointAnnotation,
                         load_collection, load_feature_maps)
from .config import (ConfigError, IoConfig, ObjectiveConfig, PckConfig,
                     RunConfig, TrainConfig)
from .geometry import TpsTransform, bilinear_sample, sample_tps, splat_accumulate
from .matching import PseudoCorrespondenceSet, build_all_pairs, mutual_nearest_neighbors
from .model import AlignmentNetwork, CanonicalGrid, init_model
from .train import TrainResult, resume, train_collection

__version__ = "0.1.0"

__all__ = [
    "AlignmentNetwork", "CanonicalGrid", "ConfigError", "FeatureMap",
    "ImageCollection", "IoConfig", "KeypointAnnotation", "ObjectiveConfig",
    "PckConfig", "PseudoCorrespondenceSet", "RunConfig", "TpsTransform",
    "TrainConfig", "TrainResult", "bilinear_sample", "build_all_pairs",
    "init_model", "load_collection", "load_feature_maps",
    "mutual_nearest_neighbors", "resume", "sample_tps", "splat_accumulate",
    "train_collection",
]
