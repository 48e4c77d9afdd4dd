"""Entity-level and weighted F1 metrics.

Chunking follows seqeval's default (lenient) mode for BIO tags: an ``I-t``
that does not continue a chunk of type ``t`` opens a new one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True, order=True)
class EntitySpan:
    start: int
    end: int  # inclusive
    label: str


def _split_tag(tag: str, pos: int) -> tuple[str, str]:
    if tag == "O":
        return "O", ""
    if len(tag) >= 3 and tag[0] in "BI" and tag[1] == "-":
        return tag[0], tag[2:]
    raise ValueError(f"malformed BIO tag {tag!r} at position {pos}")


def bio_extract(tags: Sequence[str]) -> list[EntitySpan]:
    spans: list[EntitySpan] = []
    start = None
    cur_type = ""
    for i, tag in enumerate(tags):
        prefix, typ = _split_tag(tag, i)
        continues = prefix == "I" and start is not None and typ == cur_type
        if continues:
            continue
        if start is not None:
            spans.append(EntitySpan(start, i - 1, cur_type))
            start = None
        if prefix != "O":
            start, cur_type = i, typ
    if start is not None:
        spans.append(EntitySpan(start, len(tags) - 1, cur_type))
    return spans


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _prf(tp: int, n_pred: int, n_true: int) -> PRF:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_true if n_true else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(p, r, f)


def entity_f1(true_tags: Sequence[Sequence[str]], pred_tags: Sequence[Sequence[str]]) -> PRF:
    """Micro P/R/F1 over exact (sequence, start, end, label) matches."""
    if len(true_tags) != len(pred_tags):
        raise ValueError(f"{len(true_tags)} gold sequences vs {len(pred_tags)} predicted")
    tp = n_pred = n_true = 0
    for k, (t, p) in enumerate(zip(true_tags, pred_tags)):
        if len(t) != len(p):
            raise ValueError(f"sequence {k}: {len(t)} gold tags vs {len(p)} predicted")
        ts, ps = set(bio_extract(t)), set(bio_extract(p))
        tp += len(ts & ps)
        n_true += len(ts)
        n_pred += len(ps)
    return _prf(tp, n_pred, n_true)


def _binary_f1(t: np.ndarray, p: np.ndarray) -> float:
    tp = int(np.sum(t & p))
    return _prf(tp, int(p.sum()), int(t.sum())).f1


def weighted_f1(true, pred, kind: str = "single_label") -> float:
    """Support-weighted mean of per-class F1.

    ``single_label`` takes class ids; ``multi_label`` takes binary
    ``[n_samples, n_labels]`` matrices and scores each label's positive
    class. Classes with no true support carry zero weight; with no support
    at all the score is 0.
    """
    t = np.asarray(true)
    p = np.asarray(pred)
    if t.shape != p.shape:
        raise ValueError(f"true {t.shape} vs pred {p.shape}")
    if kind == "single_label":
        classes = np.union1d(t, p)
        cols_t = [t == c for c in classes]
        cols_p = [p == c for c in classes]
    elif kind == "multi_label":
        if t.ndim != 2:
            raise ValueError("multi_label expects [n_samples, n_labels] arrays")
        t, p = t.astype(bool), p.astype(bool)
        cols_t = list(t.T)
        cols_p = list(p.T)
    else:
        raise ValueError(f"unknown kind {kind!r}")
    support = np.array([c.sum() for c in cols_t], dtype=np.float64)
    total = support.sum()
    if total == 0:
        return 0.0
    f1s = np.array([_binary_f1(ct, cp) for ct, cp in zip(cols_t, cols_p)])
    return float(np.dot(f1s, support) / total)


def median(values: Sequence[float]) -> float:
    vals = sorted(float(v) for v in values)
    if not vals:
        raise ValueError("median of an empty sequence")
    n = len(vals)
    mid = n // 2
    return vals[mid] if n % 2 else (vals[mid - 1] + vals[mid]) / 2
