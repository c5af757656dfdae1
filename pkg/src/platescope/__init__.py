"""Semi-supervised classification of plate-structured screening images.

The package trains a two-model mean-teacher ensemble on multi-channel well
images, normalizes away plate and batch nuisance, and post-processes
predictions so every plate uses each class exactly once. Heavy lifting lives
in focused modules (autodiff, backbone, losses, data, trainer, ensemble,
assignment, metrics); :mod:`platescope.estimators` offers a scikit-learn
style facade and :mod:`platescope.cli` a command-line pipeline.
"""

from .assignment import (
    Assignment,
    ProbabilityMatrix,
    apply_postprocess,
    balance_heuristic,
    balance_oracle,
    log_objective,
    plate_matrices,
)
from .autodiff import Tape, Tensor
from .backbone import BackboneConfig, ModelParams, build, class_logits, forward
from .data import (
    DatasetManifest,
    NormStats,
    SyntheticConfig,
    WellRecord,
    compute_norm_stats,
    generate_synthetic,
    normalize,
    normalize_all,
    read_dataset,
    write_dataset,
)
from .ensemble import (
    EnsembleState,
    ensemble_predict,
    init_ensemble,
    maybe_refresh_pseudo_labels,
    run_training,
    validation_accuracy,
)
from .errors import (
    BadMagicError,
    ChecksumError,
    ConfigError,
    DataFormatError,
    NumericError,
    PlatescopeError,
    ShapeError,
    TruncatedFileError,
)
from .estimators import GroupStandardizer, MeanTeacherClassifier, PlateBalancer
from .losses import ArcFaceConfig, arcface_loss, consistency_loss, pseudo_label_loss, softmax_ce_loss
from .metrics import EvalResult, evaluate, evaluate_mapping, multiclass_accuracy, run_ablation_ladder, write_report
from .trainer import (
    TrainConfig,
    TrainerState,
    TrainingData,
    assemble_training_data,
    augment,
    ema_update,
    finetune_per_celltype,
    init_trainer,
    load_checkpoint,
    predict_probs,
    save_checkpoint,
    train_epoch,
)

__version__ = "0.1.0"

__all__ = [
    "Assignment",
    "ProbabilityMatrix",
    "apply_postprocess",
    "balance_heuristic",
    "balance_oracle",
    "log_objective",
    "plate_matrices",
    "Tape",
    "Tensor",
    "BackboneConfig",
    "ModelParams",
    "build",
    "class_logits",
    "forward",
    "DatasetManifest",
    "NormStats",
    "SyntheticConfig",
    "WellRecord",
    "compute_norm_stats",
    "generate_synthetic",
    "normalize",
    "normalize_all",
    "read_dataset",
    "write_dataset",
    "EnsembleState",
    "ensemble_predict",
    "init_ensemble",
    "maybe_refresh_pseudo_labels",
    "run_training",
    "validation_accuracy",
    "BadMagicError",
    "ChecksumError",
    "ConfigError",
    "DataFormatError",
    "NumericError",
    "PlatescopeError",
    "ShapeError",
    "TruncatedFileError",
    "GroupStandardizer",
    "MeanTeacherClassifier",
    "PlateBalancer",
    "ArcFaceConfig",
    "arcface_loss",
    "consistency_loss",
    "pseudo_label_loss",
    "softmax_ce_loss",
    "EvalResult",
    "evaluate",
    "evaluate_mapping",
    "multiclass_accuracy",
    "run_ablation_ladder",
    "write_report",
    "TrainConfig",
    "TrainerState",
    "TrainingData",
    "assemble_training_data",
    "augment",
    "ema_update",
    "finetune_per_celltype",
    "init_trainer",
    "load_checkpoint",
    "predict_probs",
    "save_checkpoint",
    "train_epoch",
]
