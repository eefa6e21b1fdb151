"""Desk-scale metric learning with stripe/channel-aligned embeddings.

A two-branch network pools a backbone feature map into R stripe features and
one channel-expanded global feature; an alignment penalty ties the r-th
C-channel block of the global feature to the r-th stripe, which makes prefix
distances over the global vector meaningful for partially visible probes.
"""

from .config import (
    ConfigError,
    DataConfig,
    EvalConfig,
    LossWeights,
    ModelConfig,
    PKBatchSpec,
    PreprocessConfig,
    RunConfig,
    SyntheticSpec,
    TrainConfig,
    load_run_config,
    save_run_config,
)
from .data import DatasetError, LabeledSample, generate_synthetic, load_directory, occlude
from .evaluation import (
    FeatureGallery,
    RankingReport,
    compute_cmc,
    compute_map,
    distance_matrix,
    evaluate_ranking,
    extract_features,
    load_gallery,
    pair_distance,
    save_gallery,
)
from .losses import classification_loss, combine_losses, scp_loss, trihard_loss
from .model import Model, build_model, load_model_checkpoint, local_branch, split_channels
from .training import TrainResult, lr_at, overfit_smoke, train

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataConfig",
    "DatasetError",
    "EvalConfig",
    "FeatureGallery",
    "LabeledSample",
    "LossWeights",
    "Model",
    "ModelConfig",
    "PKBatchSpec",
    "PreprocessConfig",
    "RankingReport",
    "RunConfig",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "build_model",
    "classification_loss",
    "combine_losses",
    "compute_cmc",
    "compute_map",
    "distance_matrix",
    "evaluate_ranking",
    "extract_features",
    "generate_synthetic",
    "load_directory",
    "load_gallery",
    "load_model_checkpoint",
    "load_run_config",
    "local_branch",
    "lr_at",
    "occlude",
    "overfit_smoke",
    "pair_distance",
    "save_gallery",
    "save_run_config",
    "scp_loss",
    "split_channels",
    "train",
    "trihard_loss",
    "__version__",
]
