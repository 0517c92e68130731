"""Canonical-form discriminative models and linear identifiability analysis."""

from .analysis import (
    CcaReport,
    DiversityReport,
    RecoveryReport,
    ReprDump,
    cca,
    context_recover,
    diversity_check_f,
    fit_linear_map,
    pca_project,
    svcca,
    theorem1_recover,
)
from .model import (
    CandidateBatch,
    CanonicalModel,
    EmbeddingTable,
    LogBilinearArch,
    MlpArch,
    SharedWithF,
    apply_linear_transform,
    encode_f,
    encode_g,
    init_model,
    load_checkpoint,
    log_prob,
    nll_and_grads,
    save_checkpoint,
)
from .train import TrainConfig, TrainTrace, grad_check, train

__all__ = [
    "CandidateBatch", "CanonicalModel", "CcaReport", "DiversityReport", "EmbeddingTable",
    "LogBilinearArch", "MlpArch", "RecoveryReport", "ReprDump", "SharedWithF", "TrainConfig",
    "TrainTrace", "apply_linear_transform", "cca", "context_recover", "diversity_check_f",
    "encode_f", "encode_g", "fit_linear_map", "grad_check", "init_model", "load_checkpoint",
    "log_prob", "nll_and_grads", "pca_project", "save_checkpoint", "svcca",
    "theorem1_recover", "train",
]
