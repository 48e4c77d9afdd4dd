import csv
import json
import subprocess

import pytest

from bcmb.cli import (
    EXIT_CONFIG,
    EXIT_DATA,
    OUTPUT_ROOT_ENV,
    apply_override,
    build_config,
    git_blob_hash,
    main,
    preset_names,
    schema_errors,
)
from bcmb.pretrain import load_checkpoint

# small enough to pretrain and fine-tune in a few seconds
SMALL = [
    "--set", "phases.0.sources.biomed=1",
    "--set", "phases.0.sources.clinical=1",
    "--set", "phases.1.sources.clinical=1",
    "--set", "tasks.0.epochs=2",
    "--set", "tasks.0.seeds=[0,1]",
    "--set", "tasks.0.lr_grid=[0.003]",
]  # fmt: skip


def read_rows(path):
    return list(csv.reader(open(path)))


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    with pytest.MonkeyPatch.context() as mp:
        mp.chdir(d)
        assert main(["synth-data", "data", "--n-train", "40", "--n-val", "8", "--n-ner", "60"]) == 0
        assert main(["pretrain", "-c", "preset-tiny", *SMALL]) == 0
    return d


@pytest.fixture
def in_workdir(workdir, monkeypatch):
    monkeypatch.chdir(workdir)
    monkeypatch.delenv(OUTPUT_ROOT_ENV, raising=False)
    return workdir


def test_presets_ship():
    assert {"preset-tiny", "preset-small"} <= set(preset_names())
    for name in preset_names():
        assert build_config(name, []) and not schema_errors(build_config(name, []))


def test_schema_lists_every_error():
    errs = schema_errors({"model": {"n_layers": 0, "window": "x"}, "bogus": 1})
    text = "\n".join(errs)
    assert "output_dir" in text and "model/n_layers" in text and "model/window" in text and "bogus" in text
    assert len(errs) == 4


def test_apply_override():
    doc = {"phases": [{"peak_lr": 1.0}]}
    apply_override(doc, "phases.0.peak_lr=0.5")
    apply_override(doc, "model.n_layers=3")
    apply_override(doc, "output_dir=runs/x")
    assert doc == {"phases": [{"peak_lr": 0.5}], "model": {"n_layers": 3}, "output_dir": "runs/x"}
    for bad in ("noequals", "phases.5.x=1", "a..b=1"):
        with pytest.raises(ValueError):
            apply_override(doc, bad)


def test_git_blob_hash_matches_git(tmp_path):
    p = tmp_path / "f.txt"
    p.write_text("hello\n")
    out = subprocess.run(["git", "hash-object", str(p)], capture_output=True, text=True)
    if out.returncode:
        pytest.skip("git unavailable")
    assert git_blob_hash(p) == out.stdout.strip()


def test_invalid_config_exit_code_and_manifest(in_workdir, capsys):
    code = main(["pretrain", "-c", "preset-tiny", "--set", "output_dir=runs/bad", "--set", "model.n_layers=0", "--set", "model.window=3"])
    assert code == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "model/n_layers" in err
    manifest = json.loads((in_workdir / "runs/bad/manifest.json").read_text())
    assert manifest["status"] == "error" and manifest["exit_code"] == EXIT_CONFIG


def test_missing_input_file(in_workdir):
    code = main(["pretrain", "-c", "preset-tiny", "--set", "output_dir=runs/nofile", "--set", "tokenizer.corpus=data/missing.jsonl"])
    assert code == EXIT_CONFIG
    assert "missing.jsonl" in json.loads((in_workdir / "runs/nofile/manifest.json").read_text())["error"]


def test_corrupt_checkpoint_is_data_error(in_workdir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nope")
    assert main(["checkpoint-inspect", str(bad)]) == EXIT_DATA


def test_pretrain_outputs(in_workdir, capsys):
    out = in_workdir / "runs/preset-tiny"
    assert (out / "checkpoints/phase1_final.ckpt").is_file() and (out / "checkpoints/phase2_final.ckpt").is_file()
    rows = read_rows(out / "pretrain_loss.csv")
    assert rows[0] == ["step", "phase", "lr", "loss", "source"]
    assert {r[1] for r in rows[1:]} == {"1", "2"} and [int(r[0]) for r in rows[1:]] == list(range(len(rows) - 1))
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and "data/corpus.jsonl" in manifest["inputs"]
    assert len(read_rows(out / "pretrain_eval.csv")) == 1 + 2 + 2  # both sources after each phase
    assert main(["checkpoint-inspect", str(out / "checkpoints/phase2_final.ckpt")]) == 0
    header = json.loads(capsys.readouterr().out)
    assert header["phase"] == 2 and header["global_step"] == len(rows) - 1


def test_fresh_checkpoint_inspect(in_workdir, capsys):
    out = in_workdir / "runs/fresh"
    code = main(["pretrain", "-c", "preset-tiny", *SMALL, "--set", "output_dir=runs/fresh", "--set", "phases.0.checkpoint_every=1"])
    assert code == 0
    capsys.readouterr()
    ck = sorted((out / "checkpoints").glob("phase1_step*.ckpt"))[0]
    assert main(["checkpoint-inspect", str(ck)]) == 0
    header = json.loads(capsys.readouterr().out)
    assert header["phase"] == 1 and header["phase_step"] == 1
    # same config, same bytes
    for name in ("pretrain_loss.csv", "pretrain_eval.csv"):
        assert (out / name).read_bytes() == (in_workdir / "runs/preset-tiny" / name).read_bytes()


def test_schedule_dump(in_workdir):
    code = main(["schedule-dump", "-c", "preset-tiny", *SMALL, "--set", "output_dir=runs/sched", "--set", "phases.0.steps=50", "--set", "phases.1.steps=20"])
    assert code == 0
    rows = read_rows(in_workdir / "runs/sched/schedule.csv")[1:]
    p2 = [r for r in rows if r[0] == "2"]
    assert float(p2[0][3]) == 0.003 and float(p2[-1][3]) == 0.0
    p1 = [r for r in rows if r[0] == "1"]
    assert float(p1[0][3]) == 0.0 and float(p1[5][3]) == 0.003 and len(p1) == 51


def test_schedule_dump_variant_stdout(capsys):
    assert main(["schedule-dump", "--variant", "large", "--steps", "30"]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == ["phase", "step", "stage", "lr"] and float(rows[1][3]) == 5e-5 and float(rows[-1][3]) == 0.0


def test_finetune_reports_are_byte_identical(in_workdir, monkeypatch):
    ck = in_workdir / "runs/preset-tiny/checkpoints/phase2_final.ckpt"
    vocab = in_workdir / "runs/preset-tiny/vocab.txt"
    args = ["finetune", "-c", "preset-tiny", *SMALL, "--set", f"tokenizer.path={vocab}", "--set", f"tasks.0.checkpoint={ck}"]
    for root in ("ft_a", "ft_b"):
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(in_workdir / root))
        assert main(args) == 0
    a = (in_workdir / "ft_a/runs/preset-tiny/finetune_report.csv").read_bytes()
    assert a == (in_workdir / "ft_b/runs/preset-tiny/finetune_report.csv").read_bytes()
    rows = read_rows(in_workdir / "ft_a/runs/preset-tiny/finetune_report.csv")
    assert rows[0] == ["task", "model", "lr", "seed", "metric", "value"]
    assert [r[3] for r in rows[1:]] == ["0", "1", "median"] and rows[1][4] == "entity_f1"


def test_output_root(in_workdir, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["schedule-dump", "-c", "preset-tiny", "--set", "phases.0.steps=5", "--set", "phases.1.steps=5"]) == 0
    assert (tmp_path / "root/runs/preset-tiny/schedule.csv").is_file()


def test_eval_gold_pred(tmp_path, capsys):
    gold, pred = tmp_path / "g.jsonl", tmp_path / "p.jsonl"
    gold.write_text(json.dumps({"tags": ["B-a", "I-a", "O", "B-b"]}) + "\n")
    pred.write_text(json.dumps({"tags": ["B-a", "I-a", "O", "B-a"]}) + "\n")
    assert main(["eval", "--gold", str(gold), "--pred", str(pred)]) == 0
    assert "entity_f1\t0.5" in capsys.readouterr().out
    assert main(["eval", "--gold", str(gold)]) == EXIT_CONFIG


def test_eval_checkpoint(in_workdir, capsys):
    assert main(["eval", "-c", "preset-tiny", *SMALL, "--set", "output_dir=runs/preset-tiny"]) == 0
    rows = read_rows(in_workdir / "runs/preset-tiny/mlm_eval.csv")
    assert rows[0] == ["phase", "source", "mlm_probability", "mlm_loss"] and len(rows) == 5


def test_bench_command(in_workdir):
    args = ["bench", "-c", "preset-tiny", "--set", "output_dir=runs/bench", "--set", "bench.runs=1"]
    args += ["--set", "bench.workloads=[{\"max_len\": 64, \"n_docs\": 4}]", "--set", "model.vocab_size=100"]
    assert main(args) == 0
    rows = read_rows(in_workdir / "runs/bench/bench.csv")
    assert len(rows) == 1 + 2 * 2  # two models x two modes
    assert "real tokens" in json.loads((in_workdir / "runs/bench/bench_meta.json").read_text())["token_convention"]


def test_checkpoint_loads_after_cli(in_workdir):
    ck = load_checkpoint(in_workdir / "runs/preset-tiny/checkpoints/phase1_final.ckpt")
    assert ck.phase == 1 and ck.config.n_layers == 2
