"""Multi-granularity knowledge distillation.

A teacher network self-analyzes its native logits into coarser (abstracted)
and finer (detailed) knowledge heads via fully connected branches; a student
is then distilled either head-by-head (granularity-wise) or under an
ensembled, stabilized native supervision (stable excitation). The package
also ships the accompanying measurement suite: CKA representation
similarity, per-head knowledge similarity, correlation-matrix differences,
Gaussian-noise robustness sweeps, and frozen-backbone transfer.
"""

from .checkpoint import (
    Checkpoint,
    load_checkpoint,
    save_checkpoint,
    state_checksum,
    state_checksums,
)
from .data import (
    DatasetSplit,
    add_gaussian_noise,
    load_dataset,
    make_blobs_dataset,
    make_separable_dataset,
)
from .distill import (
    BaseKDHook,
    DistillScheme,
    DistillTemperatures,
    early_loss_stability,
    hkd_reference_hook,
    make_hook,
    null_hook,
    run_baseline_distillation,
    run_distillation,
)
from .errors import (
    CheckpointFormatError,
    CheckpointVersionError,
    ConfigError,
    DatasetFormatError,
    DegenerateInputError,
    InvalidArgumentError,
    NonFiniteLossError,
)
from .evaluation import (
    DEFAULT_NOISE_GRID,
    NoiseCurve,
    SimilarityReport,
    cka_similarity,
    correlation_matrix_difference,
    knowledge_similarity,
    noise_robustness_sweep,
    top1_accuracy,
    transfer_finetune,
)
from .losses import (
    GRANULARITIES,
    cross_entropy,
    cross_entropy_grad,
    ensemble_average,
    ensemble_loss,
    ensemble_loss_grad,
    granularity_analysis_loss,
    granularity_analysis_loss_grad,
    gwd_loss,
    gwd_loss_grad,
    gwd_terms,
    hkd_loss,
    hkd_loss_grad,
    kl_divergence,
    se_loss,
    se_loss_grad,
    se_terms,
    self_analyze_loss,
    self_analyze_loss_grad,
    softmax_temp,
)
from .models import (
    GranularityOutputs,
    GranularitySpec,
    PlainModel,
    StudentBundle,
    TeacherBundle,
    attach_branches,
    build_plain_model,
    build_student,
    forward_student,
    forward_teacher,
    model_from_checkpoint,
    plain_to_checkpoint,
    strip_encoders,
    student_to_checkpoint,
    teacher_to_checkpoint,
    validate_spec,
)
from .self_analyze import SelfAnalyzeConfig, branch_agreement, run_self_analysis
from .train import TrainSchedule, train_classifier, write_metrics_csv
from .version import __version__, code_version

__all__ = [name for name in dir() if not name.startswith("_")]
