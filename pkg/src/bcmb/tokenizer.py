"""Byte-level BPE vocabulary trainer with whitespace pre-splitting.

Words are the whitespace-separated pieces of a document; merges never cross
a word boundary. The encoder emits a ``[SPACE]`` id between words so that
decoding can rebuild whitespace-normalized text.
"""

from __future__ import annotations

import codecs
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[SPACE]")
PAD, UNK, CLS, SEP, MASK, SPACE = range(len(SPECIAL_TOKENS))
N_SPECIALS = len(SPECIAL_TOKENS)

FORMAT_VERSION = 1
_HEADER = "#bcmb-vocab"


def normalize(text: str) -> str:
    return " ".join(text.split())


@dataclass(frozen=True)
class Vocab:
    """Token inventory. Ids below ``N_SPECIALS`` are the special tokens."""

    tokens: tuple[bytes, ...]
    merges: tuple[tuple[bytes, bytes], ...] = ()
    target_size: int = 0
    token_to_id: dict[bytes, int] = field(init=False, repr=False, compare=False)
    _ranks: dict[tuple[bytes, bytes], int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        mapping = {t: i for i, t in enumerate(self.tokens)}
        if len(mapping) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "token_to_id", mapping)
        object.__setattr__(self, "_ranks", {pair: r for r, pair in enumerate(self.merges)})
        object.__setattr__(self, "_cache", {})

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def id_to_token(self) -> tuple[bytes, ...]:
        return self.tokens

    @property
    def specials(self) -> dict[str, int]:
        return {name: i for i, name in enumerate(SPECIAL_TOKENS)}

    def __len__(self) -> int:
        return len(self.tokens)

    # -- encoding -----------------------------------------------------------

    def _word_pieces(self, word: bytes) -> list[bytes]:
        cache = self._cache
        hit = cache.get(word)
        if hit is not None:
            return hit
        parts = [bytes([b]) for b in word]
        ranks = self._ranks
        while len(parts) > 1:
            best = None
            best_rank = None
            for i in range(len(parts) - 1):
                r = ranks.get((parts[i], parts[i + 1]))
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = i, r
            if best is None:
                break
            parts[best : best + 2] = [parts[best] + parts[best + 1]]
        cache[word] = parts
        return parts

    def encode_word(self, word: str) -> list[int]:
        lookup = self.token_to_id
        return [lookup.get(p, UNK) for p in self._word_pieces(word.encode("utf-8"))]

    def encode(self, text: str, add_cls_sep: bool = False) -> list[int]:
        ids: list[int] = [CLS] if add_cls_sep else []
        for n, word in enumerate(text.split()):
            if n:
                ids.append(SPACE)
            ids.extend(self.encode_word(word))
        if add_cls_sep:
            ids.append(SEP)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = bytearray()
        for i in ids:
            i = int(i)
            if i == SPACE:
                out += b" "
            elif i == UNK:
                out += "�".encode("utf-8")
            elif i >= N_SPECIALS:
                out += self.tokens[i]
        return out.decode("utf-8", errors="replace")

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        lines = [f"{_HEADER} version={FORMAT_VERSION} target_size={self.target_size} merges={len(self.merges)}"]
        for i, tok in enumerate(self.tokens):
            lines.append(SPECIAL_TOKENS[i] if i < N_SPECIALS else _escape(tok))
        for a, b in self.merges:
            lines.append(f"{_escape(a)} {_escape(b)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith(_HEADER):
            raise ValueError(f"{path}: not a vocabulary file")
        meta = dict(kv.split("=", 1) for kv in lines[0].split()[1:])
        if int(meta["version"]) != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported vocabulary format version {meta['version']}")
        target, n_merges = int(meta["target_size"]), int(meta["merges"])
        body = lines[1:]
        n_tokens = len(body) - n_merges
        if n_tokens < N_SPECIALS or tuple(body[:N_SPECIALS]) != SPECIAL_TOKENS:
            raise ValueError(f"{path}: special tokens missing or out of order")
        tokens = [s.encode() for s in SPECIAL_TOKENS] + [_unescape(s) for s in body[N_SPECIALS:n_tokens]]
        merges = []
        for line in body[n_tokens:]:
            a, b = line.split(" ")
            merges.append((_unescape(a), _unescape(b)))
        return cls(tuple(tokens), tuple(merges), target)


def _escape(tok: bytes) -> str:
    return codecs.escape_encode(tok)[0].decode("ascii").replace(" ", "\\x20")


def _unescape(s: str) -> bytes:
    return codecs.escape_decode(s.encode("ascii"))[0]


def train_vocab(corpus: Iterable[str], target_size: int) -> Vocab:
    """Learn BPE merges until the vocabulary has ``target_size`` entries.

    Frequency ties go to the lexicographically smaller pair.
    """
    words: Counter[bytes] = Counter()
    n_docs = 0
    for doc in corpus:
        n_docs += 1
        words.update(w.encode("utf-8") for w in doc.split())
    if n_docs == 0 or not words:
        raise ValueError("train_vocab: corpus is empty")

    alphabet = sorted({bytes([b]) for w in words for b in w})
    floor = N_SPECIALS + len(alphabet)
    if target_size < floor:
        raise ValueError(f"train_vocab: target_size {target_size} below floor {floor} (specials + distinct bytes)")

    tokens = [s.encode() for s in SPECIAL_TOKENS] + alphabet
    known = set(tokens)
    seqs = {w: [bytes([b]) for b in w] for w in words}
    merges: list[tuple[bytes, bytes]] = []
    while len(tokens) < target_size:
        pairs: Counter[tuple[bytes, bytes]] = Counter()
        for w, parts in seqs.items():
            c = words[w]
            for i in range(len(parts) - 1):
                pairs[(parts[i], parts[i + 1])] += c
        if not pairs:
            raise ValueError(f"train_vocab: corpus supports at most {len(tokens)} tokens, asked for {target_size}")
        _, best = min((-c, p) for p, c in pairs.items())
        merged = best[0] + best[1]
        merges.append(best)
        # the same string can arise from two different splits; it is one entry
        if merged not in known:
            tokens.append(merged)
            known.add(merged)
        for w, parts in seqs.items():
            if len(parts) < 2:
                continue
            i, out = 0, []
            while i < len(parts):
                if i + 1 < len(parts) and parts[i] == best[0] and parts[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(parts[i])
                    i += 1
            seqs[w] = out
    return Vocab(tuple(tokens), tuple(merges), target_size)
