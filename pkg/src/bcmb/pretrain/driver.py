"""Multi-phase continued-pretraining driver."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import numerics as nx
from ..model import EncoderModel, encode, mlm_logits
from ..packing import pack, token_batches
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import Batch, DataError, mixture_iterator
from .masking import MaskingSpec, apply_masking
from .optim import Moments, NumericError, optimizer_step
from .schedule import SchedulerSpec, lr_at
from ..tokenizer import MASK, N_SPECIALS

log = logging.getLogger(__name__)

LOG_HEADER = ("step", "phase", "lr", "loss", "source")


@dataclass(frozen=True)
class PhaseSpec:
    """One training phase.

    ``schedule`` holds stage fractions of the phase length: ``peak_lr``,
    ``warmup``, ``decay``, ``decay_kind``, ``constant_fraction``. Step
    counts are fixed once the phase's batch stream is known.
    """

    sources: tuple[tuple[str, float], ...]
    masking: MaskingSpec = MaskingSpec()
    schedule: dict = field(default_factory=lambda: {"peak_lr": 3e-4})
    start_from: str = "previous"
    batch_tokens: int = 2048
    weight_decay: float = 1e-5
    name: str = ""

    def resolve_schedule(self, total_steps: int) -> SchedulerSpec:
        s = dict(self.schedule)
        return SchedulerSpec.from_fractions(
            float(s.pop("peak_lr")),
            total_steps,
            warmup=float(s.pop("warmup", 0.0)),
            decay=float(s.pop("decay", 0.0)),
            decay_kind=s.pop("decay_kind", "one_minus_sqrt"),
            constant_fraction=float(s.pop("constant_fraction", 0.0)),
        )


@dataclass(frozen=True)
class PhasePlan:
    phases: tuple[PhaseSpec, ...]
    seed: int = 0

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a plan needs at least one phase")
        for i, ph in enumerate(self.phases):
            if i == 0 and ph.start_from == "previous":
                raise ValueError("phase 1 cannot start from a previous phase")
            if not ph.sources:
                raise ValueError(f"phase {i + 1} has no sources")

    def sources_nested(self) -> bool:
        """True when every phase trains on a subset of the previous phase's sources."""
        for prev, cur in zip(self.phases, self.phases[1:]):
            if not {s for s, _ in cur.sources} <= {s for s, _ in prev.sources}:
                return False
        return True

    def batches(self, phase_index: int, corpora: dict[str, Sequence[np.ndarray]]) -> list[Batch]:
        ph = self.phases[phase_index]
        sources = []
        for name, epochs in ph.sources:
            if name not in corpora:
                raise DataError(f"phase {phase_index + 1}: unknown corpus {name!r}")
            sources.append((name, corpora[name], epochs))
        return list(mixture_iterator(sources, self.seed * 7919 + phase_index, ph.batch_tokens))


@dataclass
class LogRow:
    step: int
    phase: int
    lr: float
    loss: float
    source: str

    def as_tuple(self):
        return (self.step, self.phase, repr(self.lr), repr(self.loss), self.source)


@dataclass
class PhaseResult:
    checkpoint: Checkpoint
    log: list[LogRow]
    schedule: SchedulerSpec
    saved: list[Path] = field(default_factory=list)


def write_loss_log(path: str | Path, rows: Sequence[LogRow], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(LOG_HEADER)
        for r in rows:
            w.writerow(r.as_tuple())


def _train_rng(plan: PhasePlan, phase_index: int) -> np.random.Generator:
    return np.random.default_rng([plan.seed, phase_index, plan.phases[phase_index].masking.seed])


def masked_lm_loss(
    model: EncoderModel, batch, masking: MaskingSpec, rng: np.random.Generator, train: bool
) -> nx.Tensor:
    """Masked-token mean cross-entropy; logits are computed only at selected rows."""
    packed = pack(batch)
    corrupted, targets = apply_masking(packed, masking, model.config.vocab_size, rng)
    rows = np.nonzero(targets != nx.IGNORE_INDEX)[0]
    if rows.size == 0:
        # tiny batches can miss every token; supervise one eligible position
        eligible = np.nonzero(packed.token_ids >= N_SPECIALS)[0]
        if eligible.size == 0:
            raise DataError("batch has no maskable tokens")
        r = int(eligible[rng.integers(eligible.size)])
        targets[r] = packed.token_ids[r]
        ids = corrupted.token_ids.copy()
        ids[r] = MASK
        corrupted = dataclasses.replace(corrupted, token_ids=ids)
        rows = np.array([r])
    hidden = encode(model, corrupted, rng if train else None)
    logits = mlm_logits(model, nx.take_rows(hidden, rows))
    return nx.cross_entropy_with_ignore(logits, targets[rows])


def evaluate_mlm_loss(
    model: EncoderModel,
    docs: Sequence[np.ndarray],
    masking: MaskingSpec,
    seed: int = 1234,
    batch_tokens: int = 4096,
) -> float:
    """Masked-token loss averaged over all masked tokens, with a fixed corruption draw."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    for group in token_batches(docs, batch_tokens):
        batch = [docs[i] for i in group]
        packed = pack(batch)
        corrupted, targets = apply_masking(packed, masking, model.config.vocab_size, rng)
        rows = np.nonzero(targets != nx.IGNORE_INDEX)[0]
        if rows.size == 0:
            continue
        logits = mlm_logits(model, nx.take_rows(encode(model, corrupted), rows))
        total += nx.cross_entropy_with_ignore(logits, targets[rows]).item() * rows.size
        count += rows.size
    if count == 0:
        raise DataError("validation set produced no masked tokens")
    return total / count


def run_phase(
    plan: PhasePlan,
    phase_index: int,
    model: EncoderModel,
    corpora: dict[str, Sequence[np.ndarray]],
    *,
    moments: Moments | None = None,
    resume: Checkpoint | None = None,
    start_global_step: int = 0,
    checkpoint_every: int = 0,
    checkpoint_dir: str | Path | None = None,
    stop_after: int | None = None,
) -> PhaseResult:
    """Train ``model`` in place through one phase of ``plan``.

    ``resume`` continues from a checkpoint taken inside this phase. With
    ``stop_after`` the loop halts once that many phase steps are done (used
    to simulate an interruption). A checkpoint is returned at the end.
    """
    ph = plan.phases[phase_index]
    phase_no = phase_index + 1
    batches = plan.batches(phase_index, corpora)
    sched = ph.resolve_schedule(len(batches))
    rng = _train_rng(plan, phase_index)
    moments = moments if moments is not None else Moments()
    start = 0
    if resume is not None:
        if resume.config != model.config:
            raise CheckpointError("resume checkpoint was written for a different ModelConfig")
        if resume.phase != phase_no:
            raise CheckpointError(f"resume checkpoint is from phase {resume.phase}, not {phase_no}")
        model.load_state(resume.params)
        moments = resume.copy_moments()
        rng.bit_generator.state = resume.rng_state
        start = resume.phase_step
        start_global_step = resume.global_step - resume.phase_step

    end = len(batches) if stop_after is None else min(len(batches), stop_after)
    params = {n: t.data for n, t in model.params.items()}
    rows: list[LogRow] = []
    saved: list[Path] = []

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint.from_model(
            model,
            moments,
            phase=phase_no,
            global_step=start_global_step + step,
            phase_step=step,
            rng_state=rng.bit_generator.state,
            meta={"phase_name": ph.name, "phase_steps": len(batches)},
        )

    for step in range(start, end):
        batch = batches[step]
        lr = lr_at(sched, step)
        with nx.Tape() as tape:
            loss = masked_lm_loss(model, batch.docs, ph.masking, rng, train=True)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at phase {phase_no} step {step}")
        nx.backward(tape, loss)
        optimizer_step(params, {n: t.grad for n, t in model.params.items()}, lr, ph.weight_decay, moments)
        model.zero_grad()
        rows.append(LogRow(start_global_step + step, phase_no, lr, value, batch.source))
        if checkpoint_every and checkpoint_dir is not None and (step + 1) % checkpoint_every == 0 and step + 1 < len(batches):
            p = Path(checkpoint_dir) / f"phase{phase_no}_step{step + 1}.ckpt"
            save_checkpoint(snapshot(step + 1), p)
            saved.append(p)

    final = snapshot(end)
    if checkpoint_dir is not None and end == len(batches):
        p = Path(checkpoint_dir) / f"phase{phase_no}_final.ckpt"
        save_checkpoint(final, p)
        saved.append(p)
    log.info("phase %d: %d steps, last loss %.4f", phase_no, end - start, rows[-1].loss if rows else float("nan"))
    return PhaseResult(final, rows, sched, saved)


def run_plan(
    plan: PhasePlan,
    model: EncoderModel,
    corpora: dict[str, Sequence[np.ndarray]],
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
) -> list[PhaseResult]:
    """Run every phase in order, carrying parameters and optimizer moments forward."""
    results: list[PhaseResult] = []
    moments = Moments()
    gstep = 0
    for i, ph in enumerate(plan.phases):
        if ph.start_from not in ("fresh", "previous"):
            ck = load_checkpoint(ph.start_from)
            if ck.config != model.config:
                raise CheckpointError(f"{ph.start_from}: checkpoint config does not match the model config")
            model.load_state(ck.params)
            moments = ck.copy_moments()
            gstep = ck.global_step
        res = run_phase(
            plan,
            i,
            model,
            corpora,
            moments=moments,
            start_global_step=gstep,
            checkpoint_every=checkpoint_every,
            checkpoint_dir=checkpoint_dir,
        )
        moments = res.checkpoint.copy_moments()
        gstep = res.checkpoint.global_step
        results.append(res)
    return results
