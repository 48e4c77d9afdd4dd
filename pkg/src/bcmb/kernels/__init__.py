"""Attention kernels with a compiled core and a numpy fallback.

The compiled extension is used when it imports; set ``BCMB_KERNELS=numpy``
to force the fallback.
"""

from __future__ import annotations

import os

import numpy as np

from . import _attention_py

try:
    from . import _attention_ext
except ImportError:  # extension not built
    _attention_ext = None

_BACKENDS = {"numpy": _attention_py.varlen_attention}
if _attention_ext is not None:
    _BACKENDS["compiled"] = _attention_ext.varlen_attention

if os.environ.get("BCMB_KERNELS", "").lower() == "numpy" or _attention_ext is None:
    BACKEND = "numpy"
else:
    BACKEND = "compiled"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; available: {available_backends()}")
    BACKEND = name


def varlen_attention(
    q, k, v, cu_seqlens, half_window: int, scale: float, key_lengths=None, backend: str | None = None
) -> np.ndarray:
    """Softmax attention over a packed stream of sequences.

    ``q``, ``k``, ``v`` are ``[tokens, heads, head_dim]``; token ``i`` sees
    token ``j`` only inside the same ``cu_seqlens`` segment and, when
    ``half_window >= 0``, only if ``|i - j| <= half_window``.

    ``key_lengths`` (one per segment) masks keys past that offset, which is
    how a padded row is run: every slot is scored as query and key, padding
    keys then get zero weight. Queries that see no key produce zeros.
    """
    fn = _BACKENDS[backend or BACKEND]
    if q.shape != k.shape or q.shape != v.shape:
        raise ValueError(f"varlen_attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    cu = np.ascontiguousarray(cu_seqlens, dtype=np.int64)
    dt = q.dtype
    return fn(
        np.ascontiguousarray(q),
        np.ascontiguousarray(k, dtype=dt),
        np.ascontiguousarray(v, dtype=dt),
        cu,
        int(half_window),
        float(scale),
        None if key_lengths is None else np.ascontiguousarray(key_lengths, dtype=np.int64),
    )
