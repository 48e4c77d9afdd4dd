import csv
import io

import numpy as np
import pytest

from bcmb import kernels
from bcmb.bench import (
    CSV_HEADER,
    Condition,
    ThroughputResult,
    WorkloadSpec,
    class_name,
    compare_backends,
    flop_ratio,
    generate_workload,
    measure,
    parse_bench_plan,
    results_metadata,
    run_plan,
    standard_workloads,
    table,
    write_results_csv,
    write_table_csv,
)
from bcmb.model import EncoderModel, ModelConfig
from bcmb.tokenizer import N_SPECIALS


def test_fixed_workload():
    docs = generate_workload(WorkloadSpec(512, "fixed", 8192), 1000)
    assert len(docs) == 8192 and {len(d) for d in docs} == {512}
    ids = np.concatenate(docs)
    assert ids.min() >= N_SPECIALS and ids.max() < 1000


def test_normal_workload_statistics():
    spec = WorkloadSpec(512, "normal", 8192)
    lengths = np.array([len(d) for d in generate_workload(spec, 1000)])
    assert abs(lengths.mean() - 256) / 256 < 0.03
    assert spec.sd_tokens == 64 and abs(lengths.std() - 64) < 3
    assert lengths.min() >= 1 and lengths.max() <= 512


def test_zero_sd_equals_fixed_at_mean():
    lengths = {len(d) for d in generate_workload(WorkloadSpec(512, "normal", 100, sd=0.0), 100)}
    assert lengths == {256}


def test_workload_deterministic():
    spec = WorkloadSpec(64, "normal", 50, seed=4)
    a, b = generate_workload(spec, 100), generate_workload(spec, 100)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_workload_validation():
    with pytest.raises(ValueError, match="length_mode"):
        WorkloadSpec(64, "uniform")
    with pytest.raises(ValueError, match="outside"):
        WorkloadSpec(64, length=65)
    with pytest.raises(ValueError, match="non-special"):
        generate_workload(WorkloadSpec(8), N_SPECIALS)


def test_standard_workloads():
    ws = standard_workloads(n_docs=4)
    assert [w.workload_id for w in ws] == [
        "short-fixed", "short-variable", "medium-fixed", "medium-variable", "long-fixed", "long-variable",
    ]  # fmt: skip
    assert class_name(4096) == "medium" and class_name(100) == "L100"


@pytest.fixture(scope="module")
def model():
    cfg = ModelConfig(n_layers=3, d_model=32, n_heads=4, d_ff=64, vocab_size=100, max_seq_len=128, window=16)
    return EncoderModel.init(cfg)


def test_context_exceeded(model):
    docs = generate_workload(WorkloadSpec(256, "fixed", 2), 100)
    with pytest.raises(ValueError, match="exceeds model context"):
        Condition(model, docs, "padded")
    with pytest.raises(ValueError, match="exceeds workload max_len"):
        Condition(model, docs, "padded", max_len=100)
    with pytest.raises(ValueError, match="mode"):
        Condition(model, docs, "ragged")


def test_fixed_lengths_count_the_same_tokens(model):
    spec = WorkloadSpec(128, "fixed", 16)
    docs = generate_workload(spec, 100)
    pad = Condition(model, docs, "padded", spec=spec)
    unp = Condition(model, docs, "unpadded", spec=spec)
    assert pad.real_tokens == unp.real_tokens == pad.slot_tokens == unp.slot_tokens == 16 * 128


def test_variable_lengths_pad_about_double(model):
    spec = WorkloadSpec(128, "normal", 64)
    docs = generate_workload(spec, 100)
    pad = Condition(model, docs, "padded", spec=spec)
    unp = Condition(model, docs, "unpadded", spec=spec)
    assert unp.slot_tokens == unp.real_tokens
    assert 1.8 < pad.slot_tokens / pad.real_tokens < 2.2


def test_measure_reports_real_tokens(model):
    spec = WorkloadSpec(64, "normal", 16)
    docs = generate_workload(spec, 100)
    res = measure(model, docs, "padded", runs=2, spec=spec, model_name="m")
    assert res.runs == 2 and len(res.per_run) == 2 and res.kilo_tokens_per_second > 0
    assert res.real_tokens == sum(map(len, docs)) < res.slot_tokens
    assert res.workload_id == "L64-variable" and res.backend == kernels.BACKEND
    with pytest.raises(ValueError, match="runs"):
        measure(model, docs, "padded", runs=0)


def test_compare_backends(model):
    docs = generate_workload(WorkloadSpec(64, "fixed", 4), 100)
    before = kernels.BACKEND
    out = compare_backends(model, docs, runs=1)
    assert set(out) == set(kernels.available_backends()) and kernels.BACKEND == before


def _fake(res_model, cls, lmode, mode, v):
    return ThroughputResult(res_model, f"{cls}-x", cls, lmode, mode, v, 3, [v] * 3, 10, 10, 0.0, 0.0)


def test_table_marks_unsupported_classes():
    results = [_fake("base", "short", "fixed", "padded", 12.0), _fake("base", "short", "normal", "unpadded", 20.0)]
    rows = table(results, {"base": 512})
    assert rows[0] == ["model", "mode", "short_fixed", "short_variable", "medium_fixed", "medium_variable", "long_fixed", "long_variable"]
    padded = next(r for r in rows if r[1] == "padded")
    assert padded[2:] == ["12.0", "", "-", "-", "-", "-"]
    assert table([], {"base": 512}) == [rows[0]]
    assert write_table_csv(None, [rows[0]]).count("\n") == 1


def test_results_csv():
    text = write_results_csv(None, [_fake("m", "short", "normal", "padded", 1.23456)])
    rows = list(csv.reader(io.StringIO(text)))
    assert tuple(rows[0]) == CSV_HEADER and len(rows[1]) == len(CSV_HEADER)
    assert rows[1][2] == "variable" and rows[1][4] == "1.235"
    assert "real tokens" in results_metadata([])["token_convention"]


def test_plan_schema_lists_every_error():
    with pytest.raises(ValueError) as e:
        parse_bench_plan({"workloads": [{"max_len": 0, "length_mode": "odd"}], "runs": 0, "extra": 1})
    msg = str(e.value)
    assert "max_len" in msg and "odd" in msg and "runs" in msg and "extra" in msg
    plan = parse_bench_plan({"workloads": [{"max_len": 32, "n_docs": 4}], "runs": 1, "modes": ["unpadded"]})
    assert plan.modes == ("unpadded",) and plan.workloads[0].n_docs == 4


def test_run_plan_skips_long_classes(model):
    plan = parse_bench_plan({"workloads": [{"max_len": 32, "n_docs": 4}, {"max_len": 256, "n_docs": 2}], "runs": 1})
    res = run_plan({"m": model}, plan)
    assert {(r.workload_class, r.mode) for r in res} == {("L32", "padded"), ("L32", "unpadded")}


def test_flop_ratio_favours_alternating():
    alt = ModelConfig(n_layers=6, d_model=64, n_heads=4, d_ff=128, max_seq_len=8192, window=128, global_period=3)
    glob = ModelConfig(n_layers=6, d_model=64, n_heads=4, d_ff=128, max_seq_len=8192, window=128, global_period=1)
    assert 1.0 < flop_ratio(alt, 512, 8192) < flop_ratio(glob, 512, 8192)
