"""Unpadding: flat token streams with cumulative boundaries, plus the padded twin."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tokenizer import PAD


@dataclass(frozen=True)
class PackedBatch:
    token_ids: np.ndarray  # [total_tokens] int64, no PAD
    cu_seqlens: np.ndarray  # [n_seqs + 1] int64
    max_seqlen: int
    positions: np.ndarray  # [total_tokens] within-sequence index
    key_lengths: np.ndarray | None = None  # set only on padded views, see padded_view()

    @property
    def n_seqs(self) -> int:
        return len(self.cu_seqlens) - 1

    @property
    def n_tokens(self) -> int:
        return int(self.cu_seqlens[-1])

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.cu_seqlens)

    @property
    def seq_starts(self) -> np.ndarray:
        return self.cu_seqlens[:-1]

    def validate(self) -> None:
        """Raise ValueError if any structural invariant is broken."""
        cu = self.cu_seqlens
        if len(cu) < 2 or cu[0] != 0:
            raise ValueError("cu_seqlens must start at 0 and hold at least one sequence")
        gaps = np.diff(cu)
        if (gaps <= 0).any():
            raise ValueError(f"cu_seqlens not strictly increasing at sequence {int(np.argmax(gaps <= 0))}")
        if cu[-1] != len(self.token_ids) or len(self.positions) != len(self.token_ids):
            raise ValueError("cu_seqlens[-1], token count and positions disagree")
        if self.max_seqlen != int(gaps.max()):
            raise ValueError(f"max_seqlen {self.max_seqlen} != longest sequence {int(gaps.max())}")
        if self.key_lengths is not None:
            kl = np.asarray(self.key_lengths)
            if kl.shape != gaps.shape or (kl < 1).any() or (kl > gaps).any():
                raise ValueError("key_lengths must give 1..length visible keys per sequence")
        elif (self.token_ids == PAD).any():
            raise ValueError(f"PAD id found at packed offset {int(np.argmax(self.token_ids == PAD))}")
        expected = np.arange(len(self.token_ids)) - np.repeat(cu[:-1], gaps)
        bad = np.nonzero(self.positions != expected)[0]
        if bad.size:
            raise ValueError(f"positions do not restart per sequence (first bad offset {int(bad[0])})")


@dataclass(frozen=True)
class PaddedBatch:
    token_ids: np.ndarray  # [n_docs, padded_len], PAD filled
    valid: np.ndarray  # same shape, bool

    @property
    def padded_len(self) -> int:
        return self.token_ids.shape[1]

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def _check_docs(docs: Sequence[Sequence[int]], max_len: int | None) -> list[np.ndarray]:
    arrays = []
    for i, d in enumerate(docs):
        a = np.asarray(d, dtype=np.int64)
        if a.ndim != 1 or a.size == 0:
            raise ValueError(f"document {i} is empty")
        if max_len is not None and a.size > max_len:
            raise ValueError(f"document {i} has {a.size} tokens, more than max_len={max_len}")
        if (a == PAD).any():
            raise ValueError(f"document {i} contains the PAD id")
        arrays.append(a)
    if not arrays:
        raise ValueError("no documents to batch")
    return arrays


def pack(docs: Sequence[Sequence[int]], max_len: int | None = None) -> PackedBatch:
    arrays = _check_docs(docs, max_len)
    lengths = np.array([a.size for a in arrays], dtype=np.int64)
    cu = np.concatenate([[0], np.cumsum(lengths)]).astype(np.int64)
    positions = np.arange(cu[-1], dtype=np.int64) - np.repeat(cu[:-1], lengths)
    return PackedBatch(np.concatenate(arrays), cu, int(lengths.max()), positions)


def unpack(batch: PackedBatch, values, validate: bool = False) -> list[np.ndarray]:
    """Split per-token rows back into per-document chunks."""
    values = np.asarray(values)
    if values.shape[0] != batch.n_tokens:
        raise ValueError(f"unpack: {values.shape[0]} value rows for {batch.n_tokens} packed tokens")
    if validate:
        batch.validate()
    cu = batch.cu_seqlens
    return [values[cu[i] : cu[i + 1]] for i in range(batch.n_seqs)]


def pad(docs: Sequence[Sequence[int]], max_len: int | None = None, pad_to: int | None = None) -> PaddedBatch:
    """Rectangular batch; width is the longest doc unless ``pad_to`` is given."""
    arrays = _check_docs(docs, max_len)
    width = max(a.size for a in arrays)
    if pad_to is not None:
        if pad_to < width:
            raise ValueError(f"pad_to={pad_to} shorter than longest document ({width})")
        width = pad_to
    ids = np.full((len(arrays), width), PAD, dtype=np.int64)
    valid = np.zeros((len(arrays), width), dtype=bool)
    for i, a in enumerate(arrays):
        ids[i, : a.size] = a
        valid[i, : a.size] = True
    return PaddedBatch(ids, valid)


def padded_view(batch: PaddedBatch) -> PackedBatch:
    """Every slot of a padded batch as one stream, padding keys hidden.

    Lets the padded baseline run through exactly the same kernels as the
    packed path; padding rows are computed and wasted. Inference only.
    """
    B, L = batch.token_ids.shape
    lengths = batch.lengths.astype(np.int64)
    if (lengths < 1).any():
        raise ValueError("padded batch has an empty row")
    cu = np.arange(B + 1, dtype=np.int64) * L
    positions = np.tile(np.arange(L, dtype=np.int64), B)
    return PackedBatch(batch.token_ids.reshape(-1).copy(), cu, L, positions, lengths)


def token_batches(docs: Sequence[Sequence[int]], capacity: int) -> list[list[int]]:
    """Group document indices in arrival order under a token budget (next-fit).

    A document is never split; one longer than ``capacity`` gets its own batch.
    """
    groups: list[list[int]] = []
    cur: list[int] = []
    used = 0
    for i, d in enumerate(docs):
        n = len(d)
        if cur and used + n > capacity:
            groups.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += n
    if cur:
        groups.append(cur)
    return groups
