"""Pure-numpy varlen attention, blocked over queries so memory stays bounded."""

from __future__ import annotations

import numpy as np

QUERY_BLOCK = 256


def varlen_attention(q, k, v, cu_seqlens, half_window: int, scale: float, key_lengths=None) -> np.ndarray:
    T, H, hd = q.shape
    out = np.empty_like(q)
    cu = np.asarray(cu_seqlens, dtype=np.int64)
    local = half_window >= 0
    for s in range(len(cu) - 1):
        a, b = int(cu[s]), int(cu[s + 1])
        n = b - a
        nk = n if key_lengths is None else int(key_lengths[s])
        qh = q[a:b].transpose(1, 0, 2)
        kh = k[a:b].transpose(1, 0, 2)
        vh = v[a:b].transpose(1, 0, 2)
        for qs in range(0, n, QUERY_BLOCK):
            qe = min(n, qs + QUERY_BLOCK)
            if local:
                lo, hi = max(0, qs - half_window), min(n, qe + half_window)
            else:
                lo, hi = 0, n
            sc = np.matmul(qh[:, qs:qe], kh[:, lo:hi].transpose(0, 2, 1)) * q.dtype.type(scale)
            keys = np.arange(lo, hi)
            if local:
                dist = np.abs(np.arange(qs, qe)[:, None] - keys[None, :])
                sc = np.where(dist <= half_window, sc, -np.inf)
            if nk < n:  # padding keys are scored, then masked
                sc = np.where(keys < nk, sc, -np.inf)
            mx = sc.max(axis=-1, keepdims=True)
            empty = ~np.isfinite(mx)  # padding queries with no visible key
            sc -= np.where(empty, 0, mx)
            np.exp(sc, out=sc)
            den = sc.sum(axis=-1, keepdims=True)
            sc /= np.where(empty, 1, den)
            out[a + qs : a + qe] = np.matmul(sc, vh[:, lo:hi]).transpose(1, 0, 2)
    return out
