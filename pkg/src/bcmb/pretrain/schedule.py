"""Warmup-Stable-Decay learning-rate schedule."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

DECAY_KINDS = ("one_minus_sqrt", "constant_then_one_minus_sqrt")

# full-scale peak learning rates for the continued-pretraining runs
PEAK_LR_BASE = 3e-4
PEAK_LR_LARGE = 5e-5
# full-scale phase batch sizes (documents)
BATCH_SIZE_BASE = 72
BATCH_SIZE_LARGE = 77


@dataclass(frozen=True)
class SchedulerSpec:
    peak_lr: float
    warmup_steps: int = 0
    stable_steps: int = 0
    decay_steps: int = 0
    decay_kind: str = "one_minus_sqrt"
    constant_fraction: float = 0.0

    def __post_init__(self):
        if min(self.warmup_steps, self.stable_steps, self.decay_steps) < 0:
            raise ValueError("step counts must be non-negative")
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be non-negative")
        if self.decay_kind not in DECAY_KINDS:
            raise ValueError(f"decay_kind must be one of {DECAY_KINDS}, got {self.decay_kind!r}")
        if not 0.0 <= self.constant_fraction < 1.0:
            raise ValueError("constant_fraction must lie in [0, 1)")

    @property
    def total_steps(self) -> int:
        return self.warmup_steps + self.stable_steps + self.decay_steps

    @property
    def constant_decay_steps(self) -> int:
        """Steps of the decay stage held at peak before the 1-sqrt ramp."""
        if self.decay_kind != "constant_then_one_minus_sqrt":
            return 0
        # at least one ramp step so the terminal rate is still 0
        return min(int(round(self.constant_fraction * self.decay_steps)), max(self.decay_steps - 1, 0))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_fractions(
        cls,
        peak_lr: float,
        total_steps: int,
        warmup: float = 0.0,
        decay: float = 0.0,
        decay_kind: str = "one_minus_sqrt",
        constant_fraction: float = 0.0,
    ) -> "SchedulerSpec":
        """Split ``total_steps`` by stage fractions; the stable stage takes the rest."""
        if not 0.0 <= warmup + decay <= 1.0:
            raise ValueError("warmup + decay fractions must lie in [0, 1]")
        w = int(round(warmup * total_steps))
        dcy = int(round(decay * total_steps))
        return cls(peak_lr, w, total_steps - w - dcy, dcy, decay_kind, constant_fraction)


def phase2_base(peak_lr: float, total_steps: int) -> SchedulerSpec:
    """1-sqrt decay over the whole phase."""
    return SchedulerSpec(peak_lr, 0, 0, total_steps, "one_minus_sqrt")


def phase2_large(peak_lr: float, total_steps: int, constant_fraction: float = 2 / 3) -> SchedulerSpec:
    """Peak for the first ``constant_fraction`` of the phase, then 1-sqrt decay."""
    return SchedulerSpec(peak_lr, 0, 0, total_steps, "constant_then_one_minus_sqrt", constant_fraction)


def lr_at(spec: SchedulerSpec, step: int) -> float:
    if not 0 <= step <= spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps}]")
    peak = spec.peak_lr
    if step < spec.warmup_steps:
        return peak * step / spec.warmup_steps
    d = step - spec.warmup_steps - spec.stable_steps
    if d <= 0:
        return peak
    hold = spec.constant_decay_steps
    if d <= hold:
        return peak
    return peak * (1.0 - math.sqrt((d - hold) / (spec.decay_steps - hold)))
