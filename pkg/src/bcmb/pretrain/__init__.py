from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import Batch, DataError, encode_documents, mixture_iterator, read_corpus, write_corpus
from .driver import (
    LOG_HEADER,
    LogRow,
    PhasePlan,
    PhaseResult,
    PhaseSpec,
    evaluate_mlm_loss,
    masked_lm_loss,
    run_phase,
    run_plan,
    write_loss_log,
)
from .masking import MaskingSpec, apply_masking
from .optim import Moments, NumericError, optimizer_step
from .schedule import SchedulerSpec, lr_at, phase2_base, phase2_large

__all__ = [
    "Batch",
    "Checkpoint",
    "CheckpointError",
    "DataError",
    "LOG_HEADER",
    "LogRow",
    "MaskingSpec",
    "Moments",
    "NumericError",
    "PhasePlan",
    "PhaseResult",
    "PhaseSpec",
    "SchedulerSpec",
    "apply_masking",
    "encode_documents",
    "evaluate_mlm_loss",
    "load_checkpoint",
    "lr_at",
    "masked_lm_loss",
    "mixture_iterator",
    "optimizer_step",
    "phase2_base",
    "phase2_large",
    "read_corpus",
    "run_phase",
    "run_plan",
    "save_checkpoint",
    "write_corpus",
]
