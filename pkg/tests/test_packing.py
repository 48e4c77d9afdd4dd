import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcmb.packing import pack, pad, padded_view, token_batches, unpack
from bcmb.tokenizer import N_SPECIALS, PAD

docs_strategy = st.lists(st.lists(st.integers(N_SPECIALS, 99), min_size=1, max_size=40), min_size=1, max_size=30)


def test_two_docs():
    b = pack([[10, 11, 12], [20, 21, 22, 23, 24]])
    assert b.cu_seqlens.tolist() == [0, 3, 8]
    assert b.max_seqlen == 5
    assert b.positions.tolist() == [0, 1, 2, 0, 1, 2, 3, 4]


def test_single_doc_identity():
    b = pack([[7, 8, 9]])
    assert b.token_ids.tolist() == [7, 8, 9] and b.cu_seqlens.tolist() == [0, 3]


def test_errors_name_document_index():
    with pytest.raises(ValueError, match="document 1 is empty"):
        pack([[7], []])
    with pytest.raises(ValueError, match="document 2 has 4 tokens"):
        pack([[7], [8], [9, 9, 9, 9]], max_len=3)
    with pytest.raises(ValueError, match="document 0 contains the PAD"):
        pack([[PAD, 7]])
    with pytest.raises(ValueError, match="no documents"):
        pack([])


@settings(max_examples=100, deadline=None)
@given(docs_strategy)
def test_pack_invariants(docs):
    b = pack(docs)
    b.validate()
    assert b.n_tokens == sum(map(len, docs))
    assert not (b.token_ids == PAD).any()
    assert (np.diff(b.cu_seqlens) > 0).all()
    assert [c.tolist() for c in unpack(b, b.token_ids)] == docs


def test_unpack_singletons_and_row_mismatch():
    b = pack([[7], [8], [9]])
    assert [c.tolist() for c in unpack(b, b.token_ids)] == [[7], [8], [9]]
    with pytest.raises(ValueError, match="value rows"):
        unpack(b, np.zeros(4))


def test_unpack_validation_catches_corruption():
    b = pack([[7, 8, 9], [10, 11]])
    scrambled = dataclasses.replace(b, positions=b.positions[::-1].copy())
    assert len(unpack(scrambled, scrambled.token_ids)) == 2
    with pytest.raises(ValueError, match="positions"):
        unpack(scrambled, scrambled.token_ids, validate=True)
    bad_cu = dataclasses.replace(b, cu_seqlens=np.array([0, 3, 3, 5]))
    with pytest.raises(ValueError, match="strictly increasing"):
        bad_cu.validate()


def test_pad_shapes():
    p = pad([[7, 8, 9], [10, 11, 12, 13, 14]])
    assert p.token_ids.shape == (2, 5)
    assert (p.token_ids == PAD).sum() == 2
    assert p.valid.tolist() == [[True] * 3 + [False] * 2, [True] * 5]
    assert pad([[7, 8], [9, 10]]).valid.all()
    assert pad([[7]], pad_to=4).token_ids.shape == (1, 4)
    with pytest.raises(ValueError, match="pad_to"):
        pad([[7, 8, 9]], pad_to=2)


def test_pad_fraction_monte_carlo():
    # lengths ~ Normal(L/2, L/8) clipped to [1, L]; padded to L per batch of 8
    L, rng = 512, np.random.default_rng(0)
    lengths = np.clip(np.rint(rng.normal(L / 2, L / 8, size=(1000, 8))), 1, L).astype(int)
    measured = 1 - lengths.sum() / (lengths.max(axis=1).sum() * 8)
    # expectation of 1 - mean/max for a batch of 8, by a separate large draw
    big = np.clip(np.rint(rng.normal(L / 2, L / 8, size=(200_000, 8))), 1, L)
    expected = 1 - big.sum() / (big.max(axis=1).sum() * 8)
    assert abs(measured - expected) < 0.02
    docs = [np.full(n, 9) for n in lengths[0]]
    p = pad(docs)
    assert (p.token_ids == PAD).mean() == pytest.approx(1 - lengths[0].sum() / (lengths[0].max() * 8))


def test_padded_view():
    p = pad([[7, 8, 9], [10, 11]], pad_to=4)
    v = padded_view(p)
    v.validate()
    assert v.cu_seqlens.tolist() == [0, 4, 8]
    assert v.key_lengths.tolist() == [3, 2]
    assert v.positions.tolist() == [0, 1, 2, 3] * 2
    with pytest.raises(ValueError, match="key_lengths"):
        dataclasses.replace(v, key_lengths=np.array([5, 2])).validate()


def test_token_batches_next_fit():
    lens = [3, 4, 2, 6, 1, 9]
    groups = token_batches([[9] * n for n in lens], 7)
    assert groups == [[0, 1], [2], [3, 4], [5]]


@settings(max_examples=100, deadline=None)
@given(docs_strategy, st.integers(1, 80))
def test_token_batches_cover_in_order(docs, cap):
    groups = token_batches(docs, cap)
    assert [i for g in groups for i in g] == list(range(len(docs)))
    for g in groups:
        assert len(g) == 1 or sum(len(docs[i]) for i in g) <= cap
