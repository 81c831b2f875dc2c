"""Adversarial robustness at desk scale.

Trains small robust image classifiers with min-max adversarial training,
measures embedding-space distance between test points and the training
set, estimates train/test distribution divergence, and runs the
scale-and-shift attack that exploits low-density blind spots.
"""

from .attacks import (
    AttackResult,
    CwOptions,
    SuiteReport,
    attack_success,
    attack_suite,
    cw_linf_attack,
    cw_linf_attack_batch,
    pgd_min_distortion,
    pgd_min_distortion_batch,
)
from .data import Dataset, mnist_dataset, normalize, synthetic_blobs
from .errors import (
    BadMagicError,
    DimensionError,
    EmptyReportError,
    FileFormatError,
    TrainingDivergedError,
    TruncatedError,
    ValidationError,
    VersionMismatchError,
)
from .geometry import (
    DensityModel,
    FeatureMatrix,
    PerClassKl,
    kde_fit,
    kl_divergence,
    knn_distance,
    knn_distances,
    per_class_kl,
    project_pca,
    project_tsne,
    standardized_mean_distance,
)
from .harness import (
    BinnedReport,
    GridReport,
    GridRow,
    PairedHistograms,
    bin_success_by_distance,
    blindspot_grid,
    distance_binned_success,
    distance_shift_histograms,
    pgd_attack_success_rate,
)
from .nn import (
    Model,
    build_small_cnn,
    extract_features,
    extract_features_batched,
    load_checkpoint,
    save_checkpoint,
)
from .reports import emit_report, render_csv
from .training import (
    AdversarialConfig,
    EpochStats,
    TrainConfig,
    evaluate_accuracy,
    pgd_perturb,
    train_adversarial,
    train_natural,
)
from .transform import TransformParams, param_grid, scale_shift, strict_threshold

__version__ = "0.1.0"

__all__ = [
    "AdversarialConfig",
    "AttackResult",
    "BadMagicError",
    "BinnedReport",
    "CwOptions",
    "Dataset",
    "DensityModel",
    "DimensionError",
    "EmptyReportError",
    "EpochStats",
    "FeatureMatrix",
    "FileFormatError",
    "GridReport",
    "GridRow",
    "Model",
    "PairedHistograms",
    "PerClassKl",
    "SuiteReport",
    "TrainConfig",
    "TrainingDivergedError",
    "TransformParams",
    "TruncatedError",
    "ValidationError",
    "VersionMismatchError",
    "attack_success",
    "attack_suite",
    "bin_success_by_distance",
    "blindspot_grid",
    "build_small_cnn",
    "cw_linf_attack",
    "cw_linf_attack_batch",
    "distance_binned_success",
    "distance_shift_histograms",
    "emit_report",
    "evaluate_accuracy",
    "extract_features",
    "extract_features_batched",
    "kde_fit",
    "kl_divergence",
    "knn_distance",
    "knn_distances",
    "load_checkpoint",
    "mnist_dataset",
    "normalize",
    "param_grid",
    "per_class_kl",
    "pgd_attack_success_rate",
    "pgd_min_distortion",
    "pgd_min_distortion_batch",
    "pgd_perturb",
    "project_pca",
    "project_tsne",
    "render_csv",
    "save_checkpoint",
    "scale_shift",
    "standardized_mean_distance",
    "strict_threshold",
    "synthetic_blobs",
    "train_adversarial",
    "train_natural",
]
