from .ops import (
    IGNORE_INDEX,
    add,
    bce_with_logits,
    cross_entropy_with_ignore,
    dropout,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    scale,
    sigmoid,
    softmax_rows,
    take_rows,
)
from .tensor import ShapeError, Tape, Tensor, active_tape, backward, record

__all__ = [
    "IGNORE_INDEX",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "bce_with_logits",
    "cross_entropy_with_ignore",
    "dropout",
    "embedding_lookup",
    "gelu",
    "layer_norm",
    "matmul",
    "mul",
    "record",
    "reshape",
    "scale",
    "sigmoid",
    "softmax_rows",
    "take_rows",
]
