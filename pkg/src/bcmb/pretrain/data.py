"""Corpus loading and the multi-source, token-budgeted batch stream."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..tokenizer import CLS, SEP, Vocab


class DataError(ValueError):
    pass


def read_corpus(path: str | Path) -> dict[str, list[str]]:
    """Group the ``text`` field of a JSON-lines corpus by its ``source`` field."""
    out: dict[str, list[str]] = defaultdict(list)
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                out[str(rec["source"])].append(str(rec["text"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{n}: bad corpus record ({exc})") from None
    if not out:
        raise DataError(f"{path}: corpus is empty")
    return dict(out)


def write_corpus(path: str | Path, records: Iterable[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for source, text in records:
            fh.write(json.dumps({"text": text, "source": source}) + "\n")


def encode_documents(texts: Iterable[str], vocab: Vocab, max_len: int) -> list[np.ndarray]:
    """Tokenize, wrapping each chunk of at most ``max_len`` ids in CLS ... SEP."""
    if max_len < 3:
        raise ValueError("max_len must leave room for CLS, SEP and one token")
    body = max_len - 2
    docs = []
    for text in texts:
        ids = vocab.encode(text)
        for s in range(0, len(ids), body):
            docs.append(np.array([CLS, *ids[s : s + body], SEP], dtype=np.int64))
    return docs


@dataclass(frozen=True)
class Batch:
    source: str
    docs: tuple[np.ndarray, ...]

    @property
    def n_tokens(self) -> int:
        return sum(len(d) for d in self.docs)


def _source_stream(docs: Sequence[np.ndarray], epochs: float, rng: np.random.Generator) -> Iterator[np.ndarray]:
    total = sum(len(d) for d in docs)
    budget = epochs * total
    emitted = 0
    while emitted < budget:
        for i in rng.permutation(len(docs)):
            if emitted >= budget:
                return
            emitted += len(docs[i])
            yield docs[i]


def mixture_iterator(
    sources: Sequence[tuple[str, Sequence[np.ndarray], float]],
    seed: int,
    batch_tokens: int,
) -> Iterator[Batch]:
    """Single-source batches drawn from several corpora.

    Each source is replayed ``epochs`` times (reshuffled per epoch). The next
    batch's source is drawn with probability proportional to the tokens it
    still owes, so all sources finish at about the same time.
    """
    if not sources:
        raise DataError("mixture needs at least one source")
    rng = np.random.default_rng(seed)
    names, streams, remaining, lookahead = [], [], [], []
    for name, docs, epochs in sources:
        if len(docs) == 0 or sum(len(d) for d in docs) == 0:
            raise DataError(f"source {name!r} is empty")
        if epochs <= 0:
            raise DataError(f"source {name!r} needs a positive epoch count")
        names.append(name)
        stream = _source_stream(docs, epochs, np.random.default_rng([seed, len(streams)]))
        streams.append(stream)
        lookahead.append(next(stream, None))
        remaining.append(float(epochs * sum(len(d) for d in docs)))

    while True:
        live = [i for i, head in enumerate(lookahead) if head is not None]
        if not live:
            return
        weights = np.array([max(remaining[i], 1e-12) for i in live])
        pick = live[int(rng.choice(len(live), p=weights / weights.sum()))]
        batch: list[np.ndarray] = []
        used = 0
        while lookahead[pick] is not None:
            doc = lookahead[pick]
            if batch and used + len(doc) > batch_tokens:
                break
            batch.append(doc)
            used += len(doc)
            lookahead[pick] = next(streams[pick], None)
        remaining[pick] -= used
        yield Batch(names[pick], tuple(batch))
