import math
import struct
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bcmb import numerics as nx
from bcmb.model import EncoderModel, ModelConfig
from bcmb.packing import pack
from bcmb.pretrain import (
    LOG_HEADER,
    Checkpoint,
    CheckpointError,
    DataError,
    MaskingSpec,
    Moments,
    NumericError,
    PhasePlan,
    PhaseSpec,
    SchedulerSpec,
    apply_masking,
    encode_documents,
    load_checkpoint,
    lr_at,
    mixture_iterator,
    optimizer_step,
    read_corpus,
    run_phase,
    run_plan,
    save_checkpoint,
    write_corpus,
    write_loss_log,
)
from bcmb.pretrain.schedule import PEAK_LR_BASE, PEAK_LR_LARGE
from bcmb.synthetic import two_domain_corpora
from bcmb.tokenizer import CLS, MASK, N_SPECIALS, SEP, train_vocab

from conftest import random_docs

# -- masking --------------------------------------------------------------------


def test_masking_spec_validation():
    for p in (0.0, 1.0, -0.1):
        with pytest.raises(ValueError, match="mlm_probability"):
            MaskingSpec(p)
    with pytest.raises(ValueError, match="sum to 1"):
        MaskingSpec(0.3, 0.5, 0.1, 0.1)


def test_mask_only_split():
    batch = pack([np.array([CLS, *d, SEP]) for d in random_docs(np.random.default_rng(0), 50, 20, 40, 100)])
    out, targets = apply_masking(batch, MaskingSpec(0.5, 1.0, 0.0, 0.0), 100, np.random.default_rng(1))
    sel = targets != nx.IGNORE_INDEX
    assert sel.any() and (out.token_ids[sel] == MASK).all()
    assert np.array_equal(out.token_ids[~sel], batch.token_ids[~sel])
    assert np.array_equal(targets[sel], batch.token_ids[sel])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16), st.floats(0.05, 0.95))
def test_specials_never_selected(seed, p):
    rng = np.random.default_rng(seed)
    docs = [np.array([CLS, *d, SEP]) for d in random_docs(rng, 5, 1, 30, 60)]
    batch = pack(docs)
    out, targets = apply_masking(batch, MaskingSpec(p), 60, rng)
    special = batch.token_ids < N_SPECIALS
    assert (targets[special] == nx.IGNORE_INDEX).all()
    assert np.array_equal(out.token_ids[special], batch.token_ids[special])
    assert (out.token_ids[~special] >= N_SPECIALS).all() or (out.token_ids[~special] == MASK).any()


# -- schedule -------------------------------------------------------------------


def test_peak_presets():
    assert PEAK_LR_BASE == 3e-4 and PEAK_LR_LARGE == 5e-5


def test_schedule_stages():
    s = SchedulerSpec(3e-4, warmup_steps=10, stable_steps=20, decay_steps=40)
    assert lr_at(s, 0) == 0.0
    assert lr_at(s, 5) == pytest.approx(1.5e-4)
    assert lr_at(s, 10) == lr_at(s, 29) == 3e-4
    assert lr_at(s, 30) == 3e-4  # decay starts at peak
    assert lr_at(s, 40) == pytest.approx(3e-4 * (1 - math.sqrt(10 / 40)))
    assert lr_at(s, 30 + 10) == pytest.approx(1.5e-4)  # d/D = 0.25
    assert lr_at(s, 70) == 0.0
    with pytest.raises(ValueError, match="outside"):
        lr_at(s, 71)
    with pytest.raises(ValueError, match="outside"):
        lr_at(s, -1)


def test_warmup_end_is_continuous():
    s = SchedulerSpec(1.0, warmup_steps=100, stable_steps=0, decay_steps=100)
    assert abs(lr_at(s, 99) - lr_at(s, 100)) <= 0.01 + 1e-12
    assert abs(lr_at(s, 100) - lr_at(s, 101)) <= 0.1 + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.floats(0, 0.99), st.data())
def test_schedule_non_negative_and_bounded(w, s, d, frac, data):
    spec = SchedulerSpec(2e-4, w, s, d, "constant_then_one_minus_sqrt", frac)
    step = data.draw(st.integers(0, spec.total_steps))
    assert 0.0 <= lr_at(spec, step) <= 2e-4
    if d:
        assert lr_at(spec, spec.total_steps) == 0.0


def test_from_fractions():
    s = SchedulerSpec.from_fractions(1e-3, 100, warmup=0.1, decay=0.3)
    assert (s.warmup_steps, s.stable_steps, s.decay_steps) == (10, 60, 30)
    with pytest.raises(ValueError):
        SchedulerSpec.from_fractions(1e-3, 100, warmup=0.8, decay=0.3)
    with pytest.raises(ValueError, match="decay_kind"):
        SchedulerSpec(1e-3, decay_kind="cosine")


# -- optimizer ------------------------------------------------------------------


def test_zero_grad_no_decay_is_noop():
    p = {"w": np.array([1.0, -2.0])}
    optimizer_step(p, {"w": np.zeros(2)}, 0.1, 0.0, Moments())
    assert np.array_equal(p["w"], [1.0, -2.0])


def test_one_step_by_hand():
    p = {"w": np.array([1.0])}
    optimizer_step(p, {"w": np.array([0.5])}, 0.1, 0.01, Moments())
    # decay: 1 - 0.1*0.01 = 0.999; m_hat = 0.5, v_hat = 0.25; step = 0.1 * 0.5 / (0.5 + 1e-6)
    assert p["w"][0] == pytest.approx(0.999 - 0.1 * 0.5 / (0.5 + 1e-6), abs=1e-15)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(NumericError, match="'layers.0.w1'"):
        optimizer_step({"layers.0.w1": np.ones(2)}, {"layers.0.w1": np.array([1.0, np.nan])}, 0.1, 0.0, Moments())


def test_finetune_weight_decay_constant():
    from bcmb.finetune import TaskSpec

    assert TaskSpec("single_label", n_classes=2).weight_decay == 1e-5


# -- data -----------------------------------------------------------------------


def _docs(n_docs, n_tokens, start=N_SPECIALS):
    return [np.full(n_tokens, start + i) for i in range(n_docs)]


def test_single_source_single_epoch():
    docs = _docs(20, 5)
    batches = list(mixture_iterator([("a", docs, 1)], seed=3, batch_tokens=12))
    seen = [int(d[0]) for b in batches for d in b.docs]
    assert sorted(seen) == [int(d[0]) for d in docs] and seen != sorted(seen)
    assert all(b.n_tokens <= 12 for b in batches)


def test_budget_accounting():
    a, b = _docs(100, 10), _docs(50, 20, start=500)
    batches = list(mixture_iterator([("A", a, 2), ("B", b, 1)], seed=0, batch_tokens=64))
    tokens = Counter()
    for bt in batches:
        tokens[bt.source] += bt.n_tokens
    assert tokens == {"A": 2000, "B": 1000}
    # interleaved, not one source after the other
    sources = [bt.source for bt in batches]
    assert sources[: len(sources) // 2].count("B") > 0


def test_fractional_epochs_end_within_one_document():
    docs = _docs(10, 7)
    got = sum(b.n_tokens for b in mixture_iterator([("a", docs, 1.5)], 0, 30))
    assert 105 <= got < 105 + 7


def test_mixture_deterministic_and_errors():
    src = [("A", _docs(30, 4), 1), ("B", _docs(30, 6), 2)]
    one = [(b.source, [d.tolist() for d in b.docs]) for b in mixture_iterator(src, 9, 20)]
    two = [(b.source, [d.tolist() for d in b.docs]) for b in mixture_iterator(src, 9, 20)]
    assert one == two
    with pytest.raises(DataError, match="empty"):
        list(mixture_iterator([("A", [], 1)], 0, 10))
    with pytest.raises(DataError, match="at least one"):
        list(mixture_iterator([], 0, 10))


def test_corpus_io(tmp_path):
    write_corpus(tmp_path / "c.jsonl", [("x", "a b"), ("y", "c"), ("x", "d")])
    assert read_corpus(tmp_path / "c.jsonl") == {"x": ["a b", "d"], "y": ["c"]}
    (tmp_path / "bad.jsonl").write_text('{"text": "a"}\n')
    with pytest.raises(DataError, match="bad.jsonl:1"):
        read_corpus(tmp_path / "bad.jsonl")
    (tmp_path / "empty.jsonl").write_text("\n")
    with pytest.raises(DataError, match="empty"):
        read_corpus(tmp_path / "empty.jsonl")


def test_encode_documents_chunks():
    vocab = train_vocab(["ab cd ef"], 13)
    docs = encode_documents(["ab cd ef ab cd ef"], vocab, 6)
    assert all(d[0] == CLS and d[-1] == SEP and len(d) <= 6 for d in docs)
    assert sum(len(d) - 2 for d in docs) == len(vocab.encode("ab cd ef ab cd ef"))


# -- checkpoint -----------------------------------------------------------------


@pytest.fixture
def ckpt(small_model):
    moments = Moments(3, {"mlm.bias": np.arange(40, dtype=np.float32)}, {"mlm.bias": np.ones(40, np.float32)})
    small_model.attach_head("cls", "single_label", 3)
    return Checkpoint.from_model(small_model, moments, phase=2, global_step=17, phase_step=5, rng_state={"s": 1})


def test_checkpoint_round_trip(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.config == ckpt.config and back.header() == ckpt.header()
    assert all(np.array_equal(back.params[k], v) for k, v in ckpt.params.items())
    assert np.array_equal(back.moments.m["mlm.bias"], ckpt.moments.m["mlm.bias"])
    assert back.rng_state == {"s": 1} and back.to_model().heads == ckpt.heads


def test_checkpoint_layout(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    assert raw[:4] == b"BCMB" and struct.unpack("<I", raw[4:8])[0] == 1
    n = struct.unpack("<I", raw[8:12])[0]
    assert b'"d_model": 32' in raw[12 : 12 + n]
    count = struct.unpack("<I", raw[12 + n : 16 + n])[0]
    assert count == len(ckpt.params)


def test_checkpoint_errors(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "a.ckpt")
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "magic.ckpt").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-100])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "ver.ckpt").write_bytes(raw[:4] + struct.pack("<I", 9) + raw[8:])
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(tmp_path / "ver.ckpt")
    other = ModelConfig(n_layers=1, d_model=32, n_heads=4, d_ff=64, vocab_size=40, max_seq_len=64, window=8)
    with pytest.raises(CheckpointError, match="does not match"):
        ckpt.to_model(expect=other)


# -- driver ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def toy():
    corpora = two_domain_corpora(n_train=80, n_val=10, seed=1)
    vocab = train_vocab(corpora["biomed"]["train"] + corpora["clinical"]["train"], 120)
    cfg = ModelConfig(n_layers=2, d_model=64, n_heads=4, d_ff=128, vocab_size=vocab.size, max_seq_len=128, window=32)
    train = {k: encode_documents(v["train"], vocab, 128) for k, v in corpora.items()}
    return cfg, train


def test_loss_falls_below_uniform_baseline(toy):
    cfg, train = toy
    plan = PhasePlan((PhaseSpec((("biomed", 50.0),), MaskingSpec(0.3), {"peak_lr": 3e-3, "warmup": 0.02}, "fresh", 512),))
    res = run_phase(plan, 0, EncoderModel.init(cfg), train, stop_after=500)
    losses = np.array([r.loss for r in res.log])
    smooth = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert smooth[0] > math.log(cfg.vocab_size) * 0.9
    below = np.nonzero(smooth < math.log(cfg.vocab_size))[0]
    assert below.size and below[0] + 10 <= 500


def test_run_plan_two_phases(toy, tmp_path):
    cfg, train = toy
    plan = PhasePlan(
        (
            PhaseSpec((("biomed", 1.0), ("clinical", 1.0)), MaskingSpec(0.3), {"peak_lr": 1e-3, "warmup": 0.1}, "fresh", 1024),
            PhaseSpec((("clinical", 1.0),), MaskingSpec(0.15), {"peak_lr": 1e-3, "decay": 1.0}, "previous", 1024),
        )
    )
    assert plan.sources_nested()
    results = run_plan(plan, EncoderModel.init(cfg), train, checkpoint_dir=tmp_path, checkpoint_every=3)
    p1, p2 = results
    assert {r.source for r in p1.log} == {"biomed", "clinical"} and {r.source for r in p2.log} == {"clinical"}
    assert p2.log[0].step == p1.log[-1].step + 1
    assert p2.log[0].lr == 1e-3 and p2.log[-1].lr < 1e-3 * 0.5
    assert (tmp_path / "phase1_final.ckpt").exists() and (tmp_path / "phase2_final.ckpt").exists()
    assert (tmp_path / "phase1_step3.ckpt").exists()
    ck = load_checkpoint(tmp_path / "phase2_final.ckpt")
    assert ck.phase == 2 and ck.global_step == len(p1.log) + len(p2.log)
    write_loss_log(tmp_path / "loss.csv", p1.log + p2.log)
    lines = (tmp_path / "loss.csv").read_text().splitlines()
    assert lines[0] == ",".join(LOG_HEADER) and len(lines) == 1 + len(p1.log) + len(p2.log)


def test_resume_rejects_wrong_phase_or_config(toy):
    cfg, train = toy
    plan = PhasePlan((PhaseSpec((("biomed", 1.0),), MaskingSpec(0.3), {"peak_lr": 1e-3}, "fresh", 1024),))
    m = EncoderModel.init(cfg)
    ck = run_phase(plan, 0, m, train, stop_after=1).checkpoint
    ck.phase = 2
    with pytest.raises(CheckpointError, match="phase 2"):
        run_phase(plan, 0, m, train, resume=ck)
    small = EncoderModel.init(ModelConfig(n_layers=1, d_model=64, n_heads=4, d_ff=128, vocab_size=cfg.vocab_size, max_seq_len=128, window=32))
    ck.phase = 1
    with pytest.raises(CheckpointError, match="different ModelConfig"):
        run_phase(plan, 0, small, train, resume=ck)


def test_plan_validation():
    spec = PhaseSpec((("a", 1.0),))
    with pytest.raises(ValueError, match="phase 1"):
        PhasePlan((spec,))
    with pytest.raises(ValueError, match="at least one"):
        PhasePlan(())
