"""Downstream fine-tuning: grid search, seed sweep, early stopping, median reporting."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..model import EncoderModel, forward_classify
from ..packing import pack
from ..pretrain.data import DataError
from ..pretrain.optim import Moments, NumericError, optimizer_step
from ..tokenizer import CLS, SEP, SPACE, Vocab
from .metrics import entity_f1, median, weighted_f1

log = logging.getLogger(__name__)

TASK_KINDS = ("single_label", "multi_label", "token_bio")

# Learning rates selected per task for (base, large) full-scale models.
LR_PRESETS = {
    "chemprot": {"base": 5e-5, "large": 2e-5},
    "phenotype": {"base": 8e-5, "large": 5e-5},
    "cos": {"base": 1e-4, "large": 1.5e-4},
    "social_history": {"base": 1.5e-4, "large": 2e-4},
    "deid": {"base": 7e-5, "large": 7e-5},
}

TASK_KIND_PRESETS = {
    "chemprot": ("single_label", 6),
    "phenotype": ("multi_label", 14),
    "cos": ("token_bio", None),
    "social_history": ("token_bio", None),
    "deid": ("token_bio", None),
}


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    n_classes: int = 0  # classification tasks
    labels: tuple[str, ...] = ()  # token_bio tag inventory
    lr_grid: tuple[float, ...] = (5e-5,)
    epochs: int = 10
    batch_size: int = 16
    weight_decay: float = 1e-5
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    patience: int = 3
    threshold: float = 0.5
    max_len: int = 512
    task_id: str = "task"

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"kind must be one of {TASK_KINDS}")
        if not self.lr_grid:
            raise ValueError("learning-rate grid is empty")
        if len(set(self.seeds)) != len(self.seeds) or not self.seeds:
            raise ValueError("seeds must be non-empty and distinct")
        if self.kind == "token_bio" and not self.labels:
            raise ValueError("token_bio tasks need a tag inventory")
        if self.kind != "token_bio" and self.n_classes < 1:
            raise ValueError("classification tasks need n_classes >= 1")

    @property
    def head_classes(self) -> int:
        return len(self.labels) if self.kind == "token_bio" else self.n_classes

    @property
    def metric_name(self) -> str:
        return "entity_f1" if self.kind == "token_bio" else "weighted_f1"


def bio_label_set(records: Sequence[dict]) -> tuple[str, ...]:
    """``O`` first, then B-/I- pairs for every entity type, sorted."""
    types = sorted({t[2:] for r in records for t in r["tags"] if t != "O"})
    return ("O",) + tuple(f"{p}-{t}" for t in types for p in "BI")


@dataclass
class Encoded:
    docs: list[np.ndarray]
    targets: list  # per-doc class id / binary vector / per-token label ids
    word_rows: list[np.ndarray] = field(default_factory=list)  # token_bio: first-subword offset per kept word
    gold: list = field(default_factory=list)


def encode_split(records: Sequence[dict], task: TaskSpec, vocab: Vocab) -> Encoded:
    if not records:
        raise DataError(f"{task.task_id}: empty split")
    enc = Encoded([], [])
    body = task.max_len - 1
    if task.kind == "token_bio":
        index = {t: i for i, t in enumerate(task.labels)}
        for r in records:
            if len(r["tokens"]) != len(r["tags"]):
                raise DataError(f"{task.task_id}: tokens/tags length mismatch")
            ids, lab, rows = [CLS], [nx.IGNORE_INDEX], []
            for w, (word, tag) in enumerate(zip(r["tokens"], r["tags"])):
                pieces = vocab.encode_word(word) or [SPACE]
                extra = (1 if w else 0) + len(pieces)
                if len(ids) + extra > body:
                    break
                if w:
                    ids.append(SPACE)
                    lab.append(nx.IGNORE_INDEX)
                if tag not in index:
                    raise DataError(f"{task.task_id}: tag {tag!r} not in label set")
                rows.append(len(ids))
                ids.extend(pieces)
                lab.extend([index[tag]] + [nx.IGNORE_INDEX] * (len(pieces) - 1))
            ids.append(SEP)
            lab.append(nx.IGNORE_INDEX)
            enc.docs.append(np.array(ids, dtype=np.int64))
            enc.targets.append(np.array(lab, dtype=np.int64))
            enc.word_rows.append(np.array(rows, dtype=np.int64))
            enc.gold.append(list(r["tags"]))
    else:
        for r in records:
            ids = vocab.encode(r["text"])[: task.max_len - 2]
            enc.docs.append(np.array([CLS, *ids, SEP], dtype=np.int64))
            if task.kind == "single_label":
                y = int(r["label"])
                if not 0 <= y < task.n_classes:
                    raise DataError(f"{task.task_id}: label {y} outside [0, {task.n_classes})")
            else:
                y = np.asarray(r["labels"], dtype=np.int64)
                if y.shape != (task.n_classes,):
                    raise DataError(f"{task.task_id}: labels vector of length {y.size}, expected {task.n_classes}")
            enc.targets.append(y)
            enc.gold.append(y)
    return enc


def _loss(model: EncoderModel, task: TaskSpec, enc: Encoded, idx, rng) -> nx.Tensor:
    batch = pack([enc.docs[i] for i in idx])
    logits = forward_classify(model, batch, task.task_id, rng=rng)
    if task.kind == "single_label":
        return nx.cross_entropy_with_ignore(logits, np.array([enc.targets[i] for i in idx]))
    if task.kind == "multi_label":
        return nx.bce_with_logits(logits, np.stack([enc.targets[i] for i in idx]))
    return nx.cross_entropy_with_ignore(logits, np.concatenate([enc.targets[i] for i in idx]))


def predict(model: EncoderModel, task: TaskSpec, enc: Encoded, batch_size: int = 64) -> list:
    preds: list = []
    for s in range(0, len(enc.docs), batch_size):
        idx = range(s, min(len(enc.docs), s + batch_size))
        batch = pack([enc.docs[i] for i in idx])
        out = forward_classify(model, batch, task.task_id).data
        if task.kind == "single_label":
            preds.extend(int(k) for k in out.argmax(axis=1))
        elif task.kind == "multi_label":
            preds.extend((1.0 / (1.0 + np.exp(-out)) > task.threshold).astype(np.int64))
        else:
            for j, i in enumerate(idx):
                a = batch.cu_seqlens[j]
                ids = out[a + enc.word_rows[i]].argmax(axis=1)
                tags = [task.labels[k] for k in ids]
                tags += ["O"] * (len(enc.gold[i]) - len(tags))  # words cut by truncation
                preds.append(tags)
    return preds


def score(task: TaskSpec, gold: list, preds: list) -> float:
    if task.kind == "token_bio":
        return entity_f1(gold, preds).f1
    if task.kind == "single_label":
        return weighted_f1(np.array(gold), np.array(preds), "single_label")
    return weighted_f1(np.stack(gold), np.stack(preds), "multi_label")


@dataclass
class RunResult:
    lr: float
    seed: int
    best_val: float
    best_epoch: int
    epochs_run: int
    test: float | None
    val_history: list[float]


def train_one(
    pretrained: EncoderModel,
    task: TaskSpec,
    train: Encoded,
    val: Encoded,
    lr: float,
    seed: int,
    test: Encoded | None = None,
) -> tuple[RunResult, EncoderModel]:
    """Fine-tune a copy of ``pretrained``; returns the best-validation model.

    Learning rate decays linearly to zero over the full epoch budget;
    training stops after ``patience`` epochs without validation improvement.
    """
    model = pretrained.copy()
    model.attach_head(task.task_id, "token_label" if task.kind == "token_bio" else task.kind, task.head_classes, seed)
    rng = np.random.default_rng(seed)
    moments = Moments()
    params = {n: t.data for n, t in model.params.items()}
    n = len(train.docs)
    steps_per_epoch = -(-n // task.batch_size)
    total = steps_per_epoch * task.epochs
    step = 0
    best, best_epoch, best_state, history = -np.inf, -1, None, []
    since_best = 0
    for epoch in range(task.epochs):
        order = rng.permutation(n)
        for s in range(0, n, task.batch_size):
            idx = order[s : s + task.batch_size]
            with nx.Tape() as tape:
                loss = _loss(model, task, train, idx, rng)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite fine-tuning loss (lr={lr}, seed={seed}, epoch={epoch})")
            nx.backward(tape, loss)
            optimizer_step(
                params, {k: t.grad for k, t in model.params.items()}, lr * (1.0 - step / total), task.weight_decay, moments
            )
            model.zero_grad()
            step += 1
        v = score(task, val.gold, predict(model, task, val))
        history.append(v)
        if v > best:
            best, best_epoch, since_best = v, epoch, 0
            best_state = {k: a.copy() for k, a in params.items()}
        else:
            since_best += 1
            if since_best >= task.patience:
                break
    model.load_state(best_state)
    t = score(task, test.gold, predict(model, task, test)) if test is not None else None
    return RunResult(lr, seed, float(best), best_epoch, len(history), t, history), model


@dataclass
class MetricReport:
    task_id: str
    metric: str
    chosen_lr: float
    per_seed: dict[int, float]
    median: float
    grid: dict[float, float]
    runs: list[RunResult] = field(default_factory=list)
    model_name: str = "model"

    def rows(self) -> list[tuple]:
        out = [(self.task_id, self.model_name, repr(self.chosen_lr), s, self.metric, repr(v)) for s, v in self.per_seed.items()]
        out.append((self.task_id, self.model_name, repr(self.chosen_lr), "median", self.metric, repr(self.median)))
        return out


REPORT_HEADER = ("task", "model", "lr", "seed", "metric", "value")


def write_report(path: str | Path, reports: Sequence[MetricReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerows(r.rows())


def finetune(
    pretrained: EncoderModel,
    task: TaskSpec,
    vocab: Vocab,
    splits: dict[str, Sequence[dict]],
    model_name: str = "model",
) -> MetricReport:
    """Grid-search the learning rate on the first seed, then rerun every seed at the winner.

    The reported value per seed is the test metric of that seed's
    best-validation checkpoint; the summary is their median.
    """
    for name in ("train", "val", "test"):
        if not splits.get(name):
            raise DataError(f"{task.task_id}: split {name!r} is empty")
    train, val, test = (encode_split(splits[k], task, vocab) for k in ("train", "val", "test"))
    first = task.seeds[0]
    grid: dict[float, float] = {}
    runs: dict[tuple[float, int], RunResult] = {}
    for lr in task.lr_grid:
        res, _ = train_one(pretrained, task, train, val, lr, first, test)
        grid[lr] = res.best_val
        runs[(lr, first)] = res
        log.info("%s lr=%g seed=%d val=%.4f", task.task_id, lr, first, res.best_val)
    chosen = max(task.lr_grid, key=lambda lr: (grid[lr], -task.lr_grid.index(lr)))
    per_seed = {}
    for seed in task.seeds:
        res = runs.get((chosen, seed))
        if res is None:
            res, _ = train_one(pretrained, task, train, val, chosen, seed, test)
            runs[(chosen, seed)] = res
        per_seed[seed] = res.test
    return MetricReport(
        task.task_id,
        task.metric_name,
        chosen,
        per_seed,
        median(list(per_seed.values())),
        grid,
        [runs[(chosen, s)] for s in task.seeds],
        model_name,
    )


def read_jsonl(path: str | Path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if line.strip():
                try:
                    out.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{n}: {exc}") from None
    return out
