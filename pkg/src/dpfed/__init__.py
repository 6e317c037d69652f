"""User-level differentially private federated training, at desk scale.

The pieces compose as: clip each user's update (`paramvec`), average the
sampled updates with a bounded-sensitivity estimator (`estimators`), add
calibrated Gaussian noise, and track the cumulative privacy cost with a
moments accountant (`accountant`). `fedtrain` wires those into the
federated loop over the toy corpora in `data`/`models`, and `cli` drives
experiments.
"""

__version__ = "0.1.0"

from .accountant import (
    DEFAULT_ORDERS,
    AccountantError,
    MomentsAccountant,
    PrivacyConfig,
    build_privacy_table,
    epsilon_for,
    log_moment,
)
from .data import TokenDataset, UserShard, load_jsonl, save_jsonl, synthesize_dataset
from .errors import ConfigError, CorruptUpdateError, ShapeMismatchError
from .estimators import (
    EstimatorConfig,
    EstimatorKind,
    WeightedUpdate,
    calibrate_sigma,
    empirical_sensitivity,
    estimate,
    sensitivity_bound,
)
from .fedtrain import (
    Algorithm,
    FedTrainError,
    RoundLog,
    TrainingConfig,
    TrainResult,
    run_training,
    sample_users,
    smoothed_accuracy,
    user_update_fedavg,
    user_update_fedsgd,
)
from .models import ModelSpec, bigram_softmax, builtin_models, evaluate, tiny_rnn
from .paramvec import (
    ClipConfig,
    ClipMode,
    ParamVector,
    add_gaussian_noise,
    clip_update,
    flat_clip,
    per_layer_clip,
)
from .rng import substream

__all__ = [
    "__version__",
    "AccountantError",
    "Algorithm",
    "ClipConfig",
    "ClipMode",
    "ConfigError",
    "CorruptUpdateError",
    "DEFAULT_ORDERS",
    "EstimatorConfig",
    "EstimatorKind",
    "FedTrainError",
    "ModelSpec",
    "MomentsAccountant",
    "ParamVector",
    "PrivacyConfig",
    "RoundLog",
    "ShapeMismatchError",
    "TokenDataset",
    "TrainResult",
    "TrainingConfig",
    "UserShard",
    "WeightedUpdate",
    "add_gaussian_noise",
    "bigram_softmax",
    "build_privacy_table",
    "builtin_models",
    "calibrate_sigma",
    "clip_update",
    "empirical_sensitivity",
    "epsilon_for",
    "estimate",
    "evaluate",
    "flat_clip",
    "load_jsonl",
    "log_moment",
    "per_layer_clip",
    "run_training",
    "sample_users",
    "save_jsonl",
    "sensitivity_bound",
    "smoothed_accuracy",
    "substream",
    "synthesize_dataset",
    "tiny_rnn",
    "user_update_fedavg",
    "user_update_fedsgd",
]
