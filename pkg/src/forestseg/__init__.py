"""Single-tree segmentation of forest laser scans with a failure-tolerant
Bayesian hyperparameter optimizer and the matching evaluation protocol."""

from .core import UNASSIGNED, LabeledCloud, SemanticLabel, SpatialIndex, VoxelGrid, build_voxel_grid, knn_query
from .evaluate import (ConfusionCounts, EvaluationReport, MatchRecord, MatchResult,
                       aggregate_dataset, detection_rates, greedy_tree_matching,
                       height_metrics, match_point_sets, point_metrics)
from .gp import GPModel, KernelConfig, expected_improvement, gp_fit, gp_predict, kernel_eval
from .instance import (PipelineFailure, PointGraph, SegmentationParams, StemSeed,
                       add_leaves, attribute_wood, build_wood_graph, find_stems,
                       normalize_heights, segment_instances)
from .optimize import (ImportanceReport, ParameterDomain, ParameterSpace, TrialRecord,
                       default_parameter_space, importance_analysis, optimize,
                       suggest_next, two_stage_optimize)
from .preprocess import (PreprocessConfig, SampleBox, Tile, filter_low_density_tiles,
                         sample_boxes, tile_cloud, voxel_downsample)
from .semantic import ClassifierSpec, ExternalClassifierError, classify

__version__ = "0.1.0"

__all__ = [
    "LabeledCloud", "SemanticLabel", "SpatialIndex", "VoxelGrid", "UNASSIGNED",
    "build_voxel_grid", "knn_query",
    "PreprocessConfig", "Tile", "SampleBox", "tile_cloud", "filter_low_density_tiles",
    "voxel_downsample", "sample_boxes",
    "ClassifierSpec", "ExternalClassifierError", "classify",
    "SegmentationParams", "StemSeed", "PointGraph", "PipelineFailure",
    "normalize_heights", "find_stems", "build_wood_graph", "attribute_wood",
    "add_leaves", "segment_instances",
    "ConfusionCounts", "MatchRecord", "MatchResult", "EvaluationReport",
    "match_point_sets", "greedy_tree_matching", "point_metrics", "height_metrics",
    "detection_rates", "aggregate_dataset",
    "KernelConfig", "GPModel", "kernel_eval", "gp_fit", "gp_predict", "expected_improvement",
    "ParameterSpace", "ParameterDomain", "TrialRecord", "ImportanceReport",
    "default_parameter_space", "suggest_next", "optimize", "importance_analysis",
    "two_stage_optimize",
    "__version__",
]
