"""Recyclable semi-supervised video scene parsing at desk scale.

The package trains small per-pixel linear segmenters, ensembles them over
scales, mirrors and models, distills the ensemble into pseudo labels, and
feeds those labels back into the next training round. Everything is numpy
based and deterministic for a fixed seed.
"""

from . import synthdata
from .ensemble import (
    ENSEMBLE_STRATEGIES,
    PseudoLabelConfig,
    argmax_label,
    ensemble_probs,
    pseudo_label,
    remap_labels,
)
from .errors import (
    ContractError,
    FormatError,
    ManifestError,
    SegcycleError,
    ValidationError,
)
from .formats import (
    load_class_mapping,
    read_image,
    read_label_map,
    read_prob_map,
    write_image,
    write_label_map,
    write_prob_map,
)
from .manifest import (
    DatasetManifest,
    FrameRecord,
    ManifestWarning,
    VideoRecord,
    load_manifest,
    save_manifest,
    validate_manifest_paths,
)
from .metrics import (
    ConfusionMatrix,
    MetricReport,
    accumulate,
    merge,
    miou,
    per_class_iou,
    report_from_confusion,
    video_consistency,
    video_consistency_over_videos,
    weighted_iou,
)
from .pipeline import (
    RoundArtifacts,
    RoundConfig,
    evaluate_model_pair,
    evaluate_predictions,
    load_round_config,
    merge_datasets,
    run_loop,
    run_round,
)
from .report import emit_report, load_report, save_report, write_report_outputs
from .tta import DEFAULT_SCALES, Segmenter, TtaConfig, bilinear_resize, hflip_prob, resize_prob, tta_aggregate
from .train import (
    LinearSegmenter,
    ModelParams,
    TrainConfig,
    TrainResult,
    cross_entropy_loss,
    dice_loss,
    features_for,
    forward,
    joint_loss,
    load_train_config,
    pixel_features,
    read_model_params,
    softmax,
    train,
    write_model_params,
)
from .types import IGNORE_LABEL, MAX_CLASSES, ClassMapping, LabelMap, ProbMap

__version__ = "0.1.0"

__all__ = [
    "ENSEMBLE_STRATEGIES",
    "DEFAULT_SCALES",
    "IGNORE_LABEL",
    "MAX_CLASSES",
    "ClassMapping",
    "ConfusionMatrix",
    "ContractError",
    "DatasetManifest",
    "FormatError",
    "FrameRecord",
    "LabelMap",
    "LinearSegmenter",
    "ManifestError",
    "ManifestWarning",
    "MetricReport",
    "ModelParams",
    "ProbMap",
    "PseudoLabelConfig",
    "RoundArtifacts",
    "RoundConfig",
    "SegcycleError",
    "Segmenter",
    "TrainConfig",
    "TrainResult",
    "TtaConfig",
    "ValidationError",
    "VideoRecord",
    "accumulate",
    "argmax_label",
    "bilinear_resize",
    "cross_entropy_loss",
    "dice_loss",
    "emit_report",
    "ensemble_probs",
    "evaluate_model_pair",
    "evaluate_predictions",
    "features_for",
    "forward",
    "hflip_prob",
    "joint_loss",
    "load_class_mapping",
    "load_manifest",
    "load_report",
    "load_round_config",
    "load_train_config",
    "merge",
    "merge_datasets",
    "miou",
    "per_class_iou",
    "pixel_features",
    "pseudo_label",
    "read_image",
    "read_label_map",
    "read_model_params",
    "read_prob_map",
    "remap_labels",
    "report_from_confusion",
    "resize_prob",
    "run_loop",
    "run_round",
    "save_manifest",
    "save_report",
    "softmax",
    "synthdata",
    "train",
    "tta_aggregate",
    "validate_manifest_paths",
    "video_consistency",
    "video_consistency_over_videos",
    "weighted_iou",
    "write_image",
    "write_label_map",
    "write_model_params",
    "write_prob_map",
    "write_report_outputs",
]
