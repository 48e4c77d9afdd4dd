from .metrics import PRF, EntitySpan, bio_extract, entity_f1, median, weighted_f1
from .protocol import (
    LR_PRESETS,
    REPORT_HEADER,
    TASK_KIND_PRESETS,
    MetricReport,
    RunResult,
    TaskSpec,
    bio_label_set,
    encode_split,
    finetune,
    predict,
    read_jsonl,
    score,
    train_one,
    write_report,
)

__all__ = [
    "LR_PRESETS",
    "PRF",
    "REPORT_HEADER",
    "TASK_KIND_PRESETS",
    "EntitySpan",
    "MetricReport",
    "RunResult",
    "TaskSpec",
    "bio_extract",
    "bio_label_set",
    "encode_split",
    "entity_f1",
    "finetune",
    "median",
    "predict",
    "read_jsonl",
    "score",
    "train_one",
    "weighted_f1",
    "write_report",
]
