from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BETA1 = 0.9
BETA2 = 0.98
EPS = 1e-6


class NumericError(FloatingPointError):
    pass


@dataclass
class Moments:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray | None],
    lr: float,
    weight_decay: float,
    moments: Moments,
) -> None:
    """One AdamW update, in place.

    Weight decay is decoupled (``p -= lr * wd * p``) and applied before the
    bias-corrected adaptive step. Parameters whose grad is None are skipped.
    """
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    moments.step += 1
    t = moments.step
    c1 = 1.0 - BETA1**t
    c2 = 1.0 - BETA2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = moments.m.get(name)
        if m is None:
            m = moments.m[name] = np.zeros_like(p)
            moments.v[name] = np.zeros_like(p)
        v = moments.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        if weight_decay:
            p -= (lr * weight_decay) * p
        p -= (lr / c1) * m / (np.sqrt(v / c2) + EPS)
