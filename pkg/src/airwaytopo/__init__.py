"""Airway tree parsing, topology-aware metrics, region losses and crop sampling."""
from .volume import Kind, VoxelGrid, load_volume, save_volume
from .morphology import DtiParams, postprocess
from .skeleton import SkeletonPointSet, detect_breakages, skeletonize
from .tree_parsing import AirwayTree, ParseParams, parse_pipeline
from .metrics import EvalParams, EvalReport, evaluate_case, weighted_mean_score

__version__ = "0.1.0"

__all__ = [
    "Kind",
    "VoxelGrid",
    "load_volume",
    "save_volume",
    "DtiParams",
    "postprocess",
    "SkeletonPointSet",
    "detect_breakages",
    "skeletonize",
    "AirwayTree",
    "ParseParams",
    "parse_pipeline",
    "EvalParams",
    "EvalReport",
    "evaluate_case",
    "weighted_mean_score",
]
