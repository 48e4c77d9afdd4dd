"""Synthetic corpora and tasks for desk-scale experiments.

Each domain is a sparse first-order Markov chain over its own word list.
Words of different domains are built from disjoint letter sets, so their
subword tokens never overlap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DOMAIN_LETTERS = {
    "biomed": "abcdefghijklm",
    "clinical": "nopqrstuvwxyz",
}


@dataclass(frozen=True)
class MarkovDomain:
    name: str
    words: tuple[str, ...]
    successors: np.ndarray  # [n_words, fanout] word indices
    weights: np.ndarray  # [n_words, fanout] transition probabilities

    @classmethod
    def build(cls, name: str, letters: str, n_words: int = 60, fanout: int = 3, seed: int = 0) -> "MarkovDomain":
        rng = np.random.default_rng(seed)
        words: list[str] = []
        seen = set()
        while len(words) < n_words:
            n = int(rng.integers(3, 7))
            w = "".join(rng.choice(list(letters), size=n))
            if w not in seen:
                seen.add(w)
                words.append(w)
        succ = np.stack([rng.choice(n_words, size=fanout, replace=False) for _ in range(n_words)])
        wts = rng.dirichlet(np.full(fanout, 2.0), size=n_words)
        return cls(name, tuple(words), succ, wts)

    def sample(self, n_docs: int, min_words: int, max_words: int, seed: int) -> list[str]:
        rng = np.random.default_rng(seed)
        docs = []
        for _ in range(n_docs):
            n = int(rng.integers(min_words, max_words + 1))
            w = int(rng.integers(len(self.words)))
            out = [self.words[w]]
            for _ in range(n - 1):
                w = int(self.successors[w, rng.choice(self.successors.shape[1], p=self.weights[w])])
                out.append(self.words[w])
            docs.append(" ".join(out))
        return docs


def two_domain_corpora(
    n_train: int = 400, n_val: int = 60, min_words: int = 8, max_words: int = 24, seed: int = 0
) -> dict[str, dict[str, list[str]]]:
    """``{"biomed": {"train": [...], "val": [...]}, "clinical": {...}}``."""
    out = {}
    for i, (name, letters) in enumerate(sorted(DOMAIN_LETTERS.items())):
        dom = MarkovDomain.build(name, letters, seed=seed * 31 + i)
        out[name] = {
            "train": dom.sample(n_train, min_words, max_words, seed * 31 + 100 + i),
            "val": dom.sample(n_val, min_words, max_words, seed * 31 + 200 + i),
        }
    return out


ENTITY_TYPES = ("age", "date", "name")


def separable_ner(n: int, seed: int = 0, n_entity_words: int = 8, n_filler: int = 30) -> list[dict]:
    """NER records whose tags follow deterministically from the words.

    Every tag (``B-t`` and ``I-t`` separately) owns a word list, so a word
    alone determines its tag. Entities span one or two words; filler words
    are always ``O``.
    """
    rng = np.random.default_rng(seed)
    lex_rng = np.random.default_rng(12345)

    def word(letters: str) -> str:
        return "".join(lex_rng.choice(list(letters), size=int(lex_rng.integers(3, 6))))

    filler = sorted({word("nopqrstuvwxyz") for _ in range(n_filler)})
    lex = {
        f"{p}-{t}": sorted({t[0] + p.lower() + word("abcdefghijklm") for _ in range(n_entity_words)})
        for t in ENTITY_TYPES
        for p in "BI"
    }
    records = []
    for _ in range(n):
        tokens: list[str] = []
        tags: list[str] = []
        for _ in range(int(rng.integers(4, 10))):
            if rng.random() < 0.35:
                t = ENTITY_TYPES[int(rng.integers(len(ENTITY_TYPES)))]
                for k in range(int(rng.integers(1, 3))):
                    tag = ("B-" if k == 0 else "I-") + t
                    tokens.append(lex[tag][int(rng.integers(len(lex[tag])))])
                    tags.append(tag)
            else:
                tokens.append(filler[int(rng.integers(len(filler)))])
                tags.append("O")
        records.append({"tokens": tokens, "tags": tags})
    return records
