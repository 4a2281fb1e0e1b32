"""Global localization of a downward-facing camera against a ground-texture map."""

from .core import MM_PER_PIXEL, FeatureSet, Pose2, WorldFeatures, apply, compose, inverse, pose_error, relative
from .features import DetectorConfig, describe, detect, extract
from .io import read_image, write_image
from .index import AnnIndex, KDForest, ScaleBuckets, linear_scan
from .locate import FailureReason, LocalizationResult, LocalizeConfig, Localizer, localize
from .mapdb import MapDatabase, MapImage, build_database, load, save
from .pca import DescriptorBasis, fit_basis, project
from .stitch import register_pair, stitch_sequence
from .synth import Degradation, generate_texture, sample_query

__version__ = "0.1.0"

__all__ = [
    "MM_PER_PIXEL", "FeatureSet", "Pose2", "WorldFeatures", "apply", "compose", "inverse", "pose_error", "relative",
    "DetectorConfig", "describe", "detect", "extract", "AnnIndex", "KDForest", "ScaleBuckets", "linear_scan",
    "FailureReason", "LocalizationResult", "LocalizeConfig", "Localizer", "localize", "MapDatabase", "MapImage",
    "build_database", "load", "save", "DescriptorBasis", "fit_basis", "project", "register_pair",
    "stitch_sequence", "Degradation", "generate_texture", "sample_query", "read_image", "write_image",
]
