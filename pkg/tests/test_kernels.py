import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcmb import kernels


def dense_oracle(q, k, v, cu, hw, scale, key_lengths=None):
    """Per-sequence dense attention in float64 with an explicit boolean mask."""
    out = np.zeros(q.shape, dtype=np.float64)
    for s in range(len(cu) - 1):
        a, b = cu[s], cu[s + 1]
        n = b - a
        nk = n if key_lengths is None else key_lengths[s]
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        ok = (j < nk) & ((hw < 0) | (np.abs(i - j) <= hw))
        for h in range(q.shape[1]):
            S = q[a:b, h].astype(np.float64) @ k[a:b, h].astype(np.float64).T * scale
            S = np.where(ok, S, -np.inf)
            for r in range(n):
                if not ok[r].any():
                    continue
                w = np.exp(S[r] - S[r].max())
                out[a + r, h] = w / w.sum() @ v[a:b, h]
    return out


def qkv(rng, T, H=2, hd=8, dtype=np.float32):
    return [rng.standard_normal((T, H, hd)).astype(dtype) for _ in range(3)]


BACKENDS = kernels.available_backends()


def test_compiled_backend_is_built():
    assert "compiled" in BACKENDS


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("hw", [-1, 0, 3, 100])
def test_matches_dense_oracle(backend, dtype, hw):
    rng = np.random.default_rng(0)
    cu = np.array([0, 5, 6, 40, 300])
    q, k, v = qkv(rng, cu[-1], dtype=dtype)
    got = kernels.varlen_attention(q, k, v, cu, hw, 0.35, backend=backend)
    assert got.dtype == dtype
    tol = 2e-6 if dtype == np.float32 else 1e-12
    assert np.abs(got - dense_oracle(q, k, v, cu, hw, 0.35)).max() < tol


@pytest.mark.parametrize("backend", BACKENDS)
@pytest.mark.parametrize("hw", [-1, 4])
def test_key_lengths_hide_padding_keys(backend, hw):
    rng = np.random.default_rng(1)
    cu = np.array([0, 20, 40, 60])
    kl = np.array([20, 7, 1])
    q, k, v = qkv(rng, 60)
    got = kernels.varlen_attention(q, k, v, cu, hw, 0.3, kl, backend=backend)
    assert np.abs(got - dense_oracle(q, k, v, cu, hw, 0.3, kl)).max() < 2e-6
    # changing padding keys/values changes nothing
    k2, v2 = k.copy(), v.copy()
    k2[27:40] += 5.0
    v2[27:40] -= 3.0
    again = kernels.varlen_attention(q, k2, v2, cu, hw, 0.3, kl, backend=backend)
    assert np.abs(again - got).max() < 1e-6


@pytest.mark.parametrize("backend", BACKENDS)
def test_query_with_no_visible_key_is_zero(backend):
    rng = np.random.default_rng(2)
    q, k, v = qkv(rng, 30)
    # local window 2, only the first key visible: queries 3.. see nothing
    out = kernels.varlen_attention(q, k, v, np.array([0, 30]), 2, 0.3, np.array([1]), backend=backend)
    assert np.all(out[3:] == 0) and np.all(np.isfinite(out))


def test_unknown_backend_and_shape_mismatch():
    with pytest.raises(ValueError, match="unknown kernel backend"):
        kernels.set_backend("gpu")
    z = np.zeros((4, 1, 2), np.float32)
    with pytest.raises(ValueError, match="shapes differ"):
        kernels.varlen_attention(z, z[:3], z, np.array([0, 4]), -1, 1.0)


@settings(max_examples=40, deadline=None)
@given(
    lengths=st.lists(st.integers(1, 70), min_size=1, max_size=6),
    hw=st.sampled_from([-1, 0, 1, 5, 32]),
    seed=st.integers(0, 2**16),
)
def test_backends_agree(lengths, hw, seed):
    rng = np.random.default_rng(seed)
    cu = np.concatenate([[0], np.cumsum(lengths)])
    q, k, v = qkv(rng, cu[-1], H=3, hd=4)
    outs = [kernels.varlen_attention(q, k, v, cu, hw, 0.5, backend=b) for b in BACKENDS]
    for o in outs[1:]:
        assert np.abs(o - outs[0]).max() < 2e-6
