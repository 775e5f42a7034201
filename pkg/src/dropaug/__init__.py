"""Dropout noise as input-space data augmentation, from scratch.

A small feedforward-network toolkit that trains softmax classifiers
under dropout-family noise, projects the noise back into input space by
gradient descent on the inputs, and trains deterministic networks on the
resulting samples. Includes the closed-form and Monte Carlo analysis of
the shared-mask feasibility probability, dataset plumbing (IDX, CSV,
PCA without whitening, synthetic blobs), and scikit-learn style
estimator wrappers.
"""

from .backprojection import (
    BackProjectionConfig,
    BackProjectionResult,
    backproject,
    bp_input_gradient,
    bp_loss,
    bp_target,
    calibrate_rates,
    mask_identity_monte_carlo,
    mask_identity_probability,
    mean_sparsity,
    save_pgm,
)
from .data import (
    Dataset,
    PcaTransform,
    dataset_to_idx,
    load_csv_features,
    load_idx,
    pca_fit,
    pca_inverse_transform,
    pca_transform,
    split,
    synth_blobs,
    write_idx,
)
from .errors import (
    ConfigError,
    DomainError,
    DropaugError,
    FormatError,
    IoError,
    NumericError,
    ShapeError,
    StateError,
    UsageError,
)
from .estimators import (
    BackProjectionAugmenter,
    MlpNoiseClassifier,
    PcaReducer,
    check_label_vector,
    check_matrix,
)
from .linalg import RngStream
from .network import (
    ForwardTrace,
    Gradients,
    LayerParams,
    MlpModel,
    backward,
    evaluate,
    forward,
    forward_gaussian,
    init_model,
    load_model,
    loss_ce,
    model_sha256,
    save_model,
    sgd_step,
)
from .noise import (
    MaskTrace,
    NoiseScheme,
    apply_mask,
    drop_fractions,
    drop_proportion_histogram,
    evaluation_scales,
    gaussian_matched_pre_activation,
    gaussian_offsets,
    histogram_to_csv,
    mask_scale_factors,
    sample_mask_trace,
)
from .training import (
    DataBundle,
    EpochRecord,
    ExperimentConfig,
    TrainHistory,
    config_hash,
    history_to_csv,
    load_checkpoint,
    save_checkpoint,
    select_and_refit,
    train_backprojected,
    train_standard,
    train_with_noise,
)

__version__ = "0.1.0"

__all__ = [
    "BackProjectionAugmenter",
    "BackProjectionConfig",
    "BackProjectionResult",
    "ConfigError",
    "DataBundle",
    "Dataset",
    "DomainError",
    "DropaugError",
    "EpochRecord",
    "ExperimentConfig",
    "FormatError",
    "ForwardTrace",
    "Gradients",
    "IoError",
    "LayerParams",
    "MaskTrace",
    "MlpModel",
    "MlpNoiseClassifier",
    "NoiseScheme",
    "NumericError",
    "PcaReducer",
    "PcaTransform",
    "RngStream",
    "ShapeError",
    "StateError",
    "TrainHistory",
    "UsageError",
    "apply_mask",
    "backproject",
    "backward",
    "bp_input_gradient",
    "bp_loss",
    "bp_target",
    "calibrate_rates",
    "check_label_vector",
    "check_matrix",
    "config_hash",
    "dataset_to_idx",
    "drop_fractions",
    "drop_proportion_histogram",
    "evaluate",
    "evaluation_scales",
    "forward",
    "forward_gaussian",
    "gaussian_matched_pre_activation",
    "gaussian_offsets",
    "histogram_to_csv",
    "history_to_csv",
    "init_model",
    "load_checkpoint",
    "load_csv_features",
    "load_idx",
    "load_model",
    "loss_ce",
    "mask_identity_monte_carlo",
    "mask_identity_probability",
    "mask_scale_factors",
    "mean_sparsity",
    "model_sha256",
    "pca_fit",
    "pca_inverse_transform",
    "pca_transform",
    "sample_mask_trace",
    "save_checkpoint",
    "save_model",
    "save_pgm",
    "select_and_refit",
    "sgd_step",
    "split",
    "synth_blobs",
    "train_backprojected",
    "train_standard",
    "train_with_noise",
    "write_idx",
]
