"""Open-vocabulary action recognition by residual feature distillation from
a frozen dual-encoder teacher, at desk scale."""

__version__ = "0.1.0"

from .encoders import (
    DualEncoder,
    EncoderConfig,
    build_toy_dual_encoder,
    pool_frames,
    student_from_teacher,
    wrap_with_adapters,
)
from .distillation import (
    ProjectorHead,
    ResidualHead,
    branch_fd_loss,
    fd_loss,
    total_fd_loss,
)
from .objective import cross_entropy, similarity_logits, total_loss
from .trainer import TrainConfig, cosine_lr, train_run, train_step, average_checkpoints
from .evaluator import (
    EvalConfig,
    EvalReport,
    ensemble_logits,
    evaluate_base_to_novel,
    evaluate_cross_dataset,
    harmonic_mean,
    multiview_logits,
    top1_accuracy,
)
from .analysis import hausdorff_similarity, semantic_distance_report, attention_heatmaps

__all__ = [
    "DualEncoder",
    "EncoderConfig",
    "EvalConfig",
    "EvalReport",
    "ProjectorHead",
    "ResidualHead",
    "TrainConfig",
    "attention_heatmaps",
    "average_checkpoints",
    "branch_fd_loss",
    "build_toy_dual_encoder",
    "cosine_lr",
    "cross_entropy",
    "ensemble_logits",
    "evaluate_base_to_novel",
    "evaluate_cross_dataset",
    "fd_loss",
    "harmonic_mean",
    "hausdorff_similarity",
    "multiview_logits",
    "pool_frames",
    "semantic_distance_report",
    "similarity_logits",
    "student_from_teacher",
    "top1_accuracy",
    "total_fd_loss",
    "total_loss",
    "train_run",
    "train_step",
    "wrap_with_adapters",
]
