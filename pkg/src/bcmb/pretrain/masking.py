from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from ..numerics import IGNORE_INDEX
from ..packing import PackedBatch
from ..tokenizer import MASK, N_SPECIALS


@dataclass(frozen=True)
class MaskingSpec:
    """MLM corruption policy: select w.p. ``mlm_probability``, then mask / randomize / keep."""

    mlm_probability: float = 0.30
    mask_fraction: float = 0.8
    random_fraction: float = 0.1
    keep_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mlm_probability < 1.0:
            raise ValueError(f"mlm_probability must lie in (0, 1), got {self.mlm_probability}")
        split = (self.mask_fraction, self.random_fraction, self.keep_fraction)
        if min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
            raise ValueError(f"corruption split must be non-negative and sum to 1, got {split}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def apply_masking(
    batch: PackedBatch, spec: MaskingSpec, vocab_size: int, rng: np.random.Generator
) -> tuple[PackedBatch, np.ndarray]:
    """Corrupt a packed batch for MLM.

    Special-token ids (CLS, SEP, word separators, ...) are never selected.
    Returns the corrupted batch and targets holding the original id at
    selected positions and ``IGNORE_INDEX`` elsewhere.
    """
    if not 0.0 < spec.mlm_probability < 1.0:
        raise ValueError(f"mlm_probability must lie in (0, 1), got {spec.mlm_probability}")
    ids = batch.token_ids
    eligible = ids >= N_SPECIALS
    selected = eligible & (rng.random(ids.shape) < spec.mlm_probability)
    targets = np.where(selected, ids, IGNORE_INDEX).astype(np.int64)

    u = rng.random(ids.shape)
    to_mask = selected & (u < spec.mask_fraction)
    to_random = selected & (u >= spec.mask_fraction) & (u < spec.mask_fraction + spec.random_fraction)
    random_ids = rng.integers(N_SPECIALS, vocab_size, size=ids.shape)
    corrupted = np.where(to_mask, MASK, np.where(to_random, random_ids, ids)).astype(np.int64)
    return dataclasses.replace(batch, token_ids=corrupted), targets
