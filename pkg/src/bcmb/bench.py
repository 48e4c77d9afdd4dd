"""Inference throughput harness: synthetic workloads, padded vs unpadded timing, CSV reports.

Throughput counts real tokens only in both modes; padding slots are wasted
work. Packing and padding happen outside the timed region and are reported
separately. Both modes run the same attention kernels: the padded baseline
feeds every slot through them and masks padding keys after scoring.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import kernels
from .model import EncoderModel, ModelConfig, count_attention_flops, encode
from .packing import pack, pad, padded_view, token_batches
from .tokenizer import N_SPECIALS, Vocab

CLASS_LENGTHS = {"short": 512, "medium": 4096, "long": 8192}
LENGTH_MODES = ("fixed", "normal")
MODES = ("padded", "unpadded")
CSV_HEADER = ("model", "workload_class", "length_mode", "mode", "ktok_per_s", "runs", "sd_tokens")
TOKEN_CONVENTION = "real tokens only; padding slots are not counted"


def class_name(max_len: int) -> str:
    for name, n in CLASS_LENGTHS.items():
        if n == max_len:
            return name
    return f"L{max_len}"


@dataclass(frozen=True)
class WorkloadSpec:
    max_len: int
    length_mode: str = "fixed"
    n_docs: int = 8192
    seed: int = 0
    length: int | None = None  # fixed mode; defaults to max_len
    mean: float | None = None  # normal mode; defaults to max_len / 2
    sd: float | None = None  # normal mode; defaults to mean / 4

    def __post_init__(self):
        if self.length_mode not in LENGTH_MODES:
            raise ValueError(f"length_mode must be one of {LENGTH_MODES}, got {self.length_mode!r}")
        if self.max_len < 1 or self.n_docs < 1:
            raise ValueError("max_len and n_docs must be positive")
        if self.length is not None and not 1 <= self.length <= self.max_len:
            raise ValueError(f"fixed length {self.length} outside [1, {self.max_len}]")
        if self.sd is not None and self.sd < 0:
            raise ValueError("sd must be non-negative")

    @property
    def fixed_length(self) -> int:
        return self.max_len if self.length is None else self.length

    @property
    def mean_length(self) -> float:
        return self.max_len / 2 if self.mean is None else self.mean

    @property
    def sd_tokens(self) -> float:
        if self.length_mode == "fixed":
            return 0.0
        return self.mean_length / 4 if self.sd is None else self.sd

    @property
    def workload_class(self) -> str:
        return class_name(self.max_len)

    @property
    def workload_id(self) -> str:
        return f"{self.workload_class}-{'fixed' if self.length_mode == 'fixed' else 'variable'}"


def standard_workloads(n_docs: int = 8192, classes: dict[str, int] | None = None, seed: int = 0) -> list[WorkloadSpec]:
    """Fixed and variable workload per length class (six for the default classes)."""
    out = []
    for max_len in (classes or CLASS_LENGTHS).values():
        for mode in LENGTH_MODES:
            out.append(WorkloadSpec(max_len, mode, n_docs, seed))
    return out


def generate_workload(spec: WorkloadSpec, vocab: Vocab | int) -> list[np.ndarray]:
    """Documents of uniform random non-special ids, lengths per ``spec``."""
    size = vocab.size if isinstance(vocab, Vocab) else int(vocab)
    if size <= N_SPECIALS:
        raise ValueError("vocabulary has no non-special tokens")
    rng = np.random.default_rng(spec.seed)
    if spec.length_mode == "fixed":
        lengths = np.full(spec.n_docs, spec.fixed_length, dtype=np.int64)
    else:
        raw = rng.normal(spec.mean_length, spec.sd_tokens, size=spec.n_docs)
        lengths = np.clip(np.rint(raw), 1, spec.max_len).astype(np.int64)
    ids = rng.integers(N_SPECIALS, size, size=int(lengths.sum()), dtype=np.int64)
    return np.split(ids, np.cumsum(lengths)[:-1])


@dataclass
class ThroughputResult:
    model: str
    workload_id: str
    workload_class: str
    length_mode: str
    mode: str
    kilo_tokens_per_second: float
    runs: int
    per_run: list[float]
    real_tokens: int
    slot_tokens: int
    pack_seconds: float
    sd_tokens: float
    backend: str = field(default_factory=lambda: kernels.BACKEND)

    def csv_row(self) -> tuple:
        return (
            self.model,
            self.workload_class,
            "fixed" if self.length_mode == "fixed" else "variable",
            self.mode,
            f"{self.kilo_tokens_per_second:.3f}",
            self.runs,
            f"{self.sd_tokens:g}",
        )


def _prepare(docs: Sequence[np.ndarray], mode: str, max_len: int, batch_docs: int):
    if mode == "unpadded":
        groups = token_batches(docs, batch_docs * max_len)
        return [pack([docs[i] for i in g], max_len) for g in groups]
    return [padded_view(pad(docs[s : s + batch_docs], max_len, pad_to=max_len)) for s in range(0, len(docs), batch_docs)]


@dataclass
class Condition:
    """One thing to time: a workload under a mode, prepared ahead of the clock."""

    model: EncoderModel
    docs: Sequence[np.ndarray]
    mode: str
    max_len: int | None = None
    batch_docs: int = 8
    model_name: str = "model"
    spec: WorkloadSpec | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not len(self.docs):
            raise ValueError("empty workload")
        longest = max(len(d) for d in self.docs)
        if self.max_len is None:
            self.max_len = self.spec.max_len if self.spec is not None else longest
        if longest > self.max_len:
            raise ValueError(f"document of {longest} tokens exceeds workload max_len={self.max_len}")
        if self.max_len > self.model.config.max_seq_len:
            raise ValueError(f"workload max length {self.max_len} exceeds model context {self.model.config.max_seq_len}")
        t0 = time.perf_counter()
        self.batches = _prepare(self.docs, self.mode, self.max_len, self.batch_docs)
        self.pack_seconds = time.perf_counter() - t0
        self.real_tokens = int(sum(len(d) for d in self.docs))
        self.slot_tokens = int(sum(b.n_tokens for b in self.batches))

    def run_once(self) -> float:
        """kTok/s of one pass over every batch."""
        t0 = time.perf_counter()
        for b in self.batches:
            encode(self.model, b)
        return self.real_tokens / (time.perf_counter() - t0) / 1000.0

    def result(self, per_run: list[float]) -> ThroughputResult:
        if self.spec is not None:
            sp = self.spec
            wid, wcls, lmode, sd = sp.workload_id, sp.workload_class, sp.length_mode, sp.sd_tokens
        else:
            lengths = [len(d) for d in self.docs]
            fixed = len(set(lengths)) == 1
            lmode = "fixed" if fixed else "normal"
            wcls = class_name(self.max_len)
            wid = f"{wcls}-{'fixed' if fixed else 'variable'}"
            sd = float(np.std(lengths))
        return ThroughputResult(
            self.model_name, wid, wcls, lmode, self.mode, statistics.fmean(per_run), len(per_run), per_run,
            self.real_tokens, self.slot_tokens, self.pack_seconds, sd,
        )  # fmt: skip


def measure_many(conditions: Sequence[Condition], runs: int = 10, threads: int = 1) -> list[ThroughputResult]:
    """Time several conditions round-robin: each round runs every condition once.

    Interleaving spreads slow drifts in machine speed evenly, so ratios
    between conditions stay meaningful on a shared desk machine. Round 0 is
    the warmup and is discarded.
    """
    if runs < 1:
        raise ValueError("runs must be >= 1")
    per_run: list[list[float]] = [[] for _ in conditions]
    with threadpool_limits(limits=threads):
        for r in range(runs + 1):
            for i, c in enumerate(conditions):
                v = c.run_once()
                if r:
                    per_run[i].append(v)
    return [c.result(p) for c, p in zip(conditions, per_run)]


def measure(
    model: EncoderModel,
    docs: Sequence[np.ndarray],
    mode: str,
    runs: int = 10,
    *,
    max_len: int | None = None,
    batch_docs: int = 8,
    model_name: str = "model",
    spec: WorkloadSpec | None = None,
    threads: int = 1,
) -> ThroughputResult:
    """Real-token throughput of forward passes over ``docs``.

    ``max_len`` is the workload's length class (padded width and the packing
    budget unit); defaults to ``spec.max_len`` or the longest document. One
    warmup pass precedes ``runs`` timed passes.
    """
    cond = Condition(model, docs, mode, max_len, batch_docs, model_name, spec)
    return measure_many([cond], runs, threads)[0]


def time_per_token(model: EncoderModel, seq_len: int, n_docs: int, runs: int = 3, seed: int = 0) -> float:
    """Seconds per token for fixed-length documents (unpadded; one sequence per batch)."""
    spec = WorkloadSpec(seq_len, "fixed", n_docs, seed)
    docs = generate_workload(spec, model.config.vocab_size)
    res = measure(model, docs, "unpadded", runs, max_len=seq_len, batch_docs=1, spec=spec)
    return 1.0 / (1000.0 * res.kilo_tokens_per_second)


def compare_backends(model: EncoderModel, docs: Sequence[np.ndarray], runs: int = 3, mode: str = "unpadded") -> dict[str, float]:
    """kTok/s per available attention backend on the same workload."""
    out = {}
    saved = kernels.BACKEND
    try:
        for name in kernels.available_backends():
            kernels.set_backend(name)
            out[name] = measure(model, docs, mode, runs).kilo_tokens_per_second
    finally:
        kernels.set_backend(saved)
    return out


# -- reporting --------------------------------------------------------------


def write_results_csv(path: str | Path | None, results: Sequence[ThroughputResult]) -> str:
    """Long-format CSV (one row per result). Returns the text; writes it when ``path`` is given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in results:
        w.writerow(r.csv_row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def table(
    results: Sequence[ThroughputResult],
    contexts: dict[str, int],
    classes: dict[str, int] | None = None,
) -> list[list[str]]:
    """Wide table: one row per (model, mode), one column per class x length mode.

    ``contexts`` maps model name to its context length; classes longer than
    that are shown as ``-``. Unmeasured but supported cells are blank.
    """
    classes = classes or CLASS_LENGTHS
    cols = [(c, lm) for c in classes for lm in ("fixed", "variable")]
    header = ["model", "mode"] + [f"{c}_{lm}" for c, lm in cols]
    if not results:
        return [header]
    cells: dict[tuple[str, str], dict[tuple[str, str], float]] = {}
    for r in results:
        lm = "fixed" if r.length_mode == "fixed" else "variable"
        cells.setdefault((r.model, r.mode), {})[(r.workload_class, lm)] = r.kilo_tokens_per_second
    rows = [header]
    for (model, mode), vals in cells.items():
        row = [model, mode]
        for c, lm in cols:
            if classes[c] > contexts.get(model, 0):
                row.append("-")
            elif (c, lm) in vals:
                row.append(f"{vals[(c, lm)]:.1f}")
            else:
                row.append("")
        rows.append(row)
    return rows


def write_table_csv(path: str | Path | None, rows: list[list[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def results_metadata(results: Sequence[ThroughputResult]) -> dict:
    return {
        "token_convention": TOKEN_CONVENTION,
        "normal_sd_rule": "sd = mean / 4, lengths clipped to [1, max_len]",
        "warmup_runs": 1,
        "timed_region": "forward passes only; packing/padding reported as pack_seconds",
        "results": [asdict(r) for r in results],
    }


# -- workload config files --------------------------------------------------

WORKLOAD_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "runs": {"type": "integer", "minimum": 1},
        "batch_docs": {"type": "integer", "minimum": 1},
        "modes": {"type": "array", "items": {"enum": list(MODES)}, "minItems": 1},
        "workloads": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["max_len"],
                "properties": {
                    "max_len": {"type": "integer", "minimum": 1},
                    "length_mode": {"enum": list(LENGTH_MODES)},
                    "n_docs": {"type": "integer", "minimum": 1},
                    "seed": {"type": "integer"},
                    "length": {"type": "integer", "minimum": 1},
                    "mean": {"type": "number", "exclusiveMinimum": 0},
                    "sd": {"type": "number", "minimum": 0},
                },
            },
        },
    },
    "required": ["workloads"],
}


@dataclass(frozen=True)
class BenchPlan:
    workloads: tuple[WorkloadSpec, ...]
    runs: int = 10
    batch_docs: int = 8
    modes: tuple[str, ...] = MODES


def parse_bench_plan(doc: dict) -> BenchPlan:
    errors = sorted(jsonschema.Draft202012Validator(WORKLOAD_SCHEMA).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        raise ValueError("; ".join(f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors))
    return BenchPlan(
        tuple(WorkloadSpec(**w) for w in doc["workloads"]),
        doc.get("runs", 10),
        doc.get("batch_docs", 8),
        tuple(doc.get("modes", MODES)),
    )


def load_bench_plan(path: str | Path) -> BenchPlan:
    return parse_bench_plan(json.loads(Path(path).read_text()))


def run_plan(models: dict[str, EncoderModel], plan: BenchPlan) -> list[ThroughputResult]:
    """Every model x workload x mode; workloads beyond a model's context are skipped.

    Conditions of one length class are interleaved with each other.
    """
    results = []
    by_class: dict[int, list[Condition]] = {}
    for spec in plan.workloads:
        for name, model in models.items():
            if spec.max_len > model.config.max_seq_len:
                continue
            docs = generate_workload(spec, model.config.vocab_size)
            for mode in plan.modes:
                by_class.setdefault(spec.max_len, []).append(
                    Condition(model, docs, mode, batch_docs=plan.batch_docs, model_name=name, spec=spec)
                )
    for conds in by_class.values():
        results.extend(measure_many(conds, plan.runs))
    return results


def flop_ratio(config: ModelConfig, short: int, long: int) -> float:
    """Analytic per-token cost ratio between two sequence lengths."""
    a = count_attention_flops(config, short)["total_with_dense"] / short
    b = count_attention_flops(config, long)["total_with_dense"] / long
    return b / a
