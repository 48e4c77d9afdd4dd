"""Command-line entry point.

Every run is driven by one JSON RunConfig (a file or a shipped preset name);
``--set path=value`` overrides individual keys. Runs with an output
directory always leave a ``manifest.json`` behind, also on failure.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import traceback
from importlib import metadata, resources
from pathlib import Path
from typing import Any, Sequence

import jsonschema
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from . import bench as benchmod
from . import kernels
from .finetune import (
    LR_PRESETS,
    TASK_KIND_PRESETS,
    MetricReport,
    TaskSpec,
    bio_label_set,
    entity_f1,
    finetune,
    read_jsonl,
    weighted_f1,
    write_report,
)
from .model import EncoderModel, ModelConfig
from .pretrain import (
    DataError,
    MaskingSpec,
    NumericError,
    PhasePlan,
    PhaseSpec,
    SchedulerSpec,
    encode_documents,
    evaluate_mlm_loss,
    load_checkpoint,
    lr_at,
    phase2_base,
    phase2_large,
    read_corpus,
    run_phase,
    write_corpus,
    write_loss_log,
)
from .pretrain.checkpoint import CheckpointError
from .pretrain.optim import Moments
from .pretrain.schedule import PEAK_LR_BASE, PEAK_LR_LARGE
from .synthetic import separable_ner, two_domain_corpora
from .tokenizer import Vocab, train_vocab

log = logging.getLogger("bcmb")

OUTPUT_ROOT_ENV = "BCMB_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- schema -----------------------------------------------------------------

_MODEL_PROPS = {
    "n_layers": {"type": "integer", "minimum": 1},
    "d_model": {"type": "integer", "minimum": 2},
    "n_heads": {"type": "integer", "minimum": 1},
    "d_ff": {"type": "integer", "minimum": 1},
    "vocab_size": {"type": "integer", "minimum": 7},
    "max_seq_len": {"type": "integer", "minimum": 3},
    "window": {"type": "integer", "minimum": 2},
    "global_period": {"type": "integer", "minimum": 1},
    "rope_theta_global": {"type": "number", "exclusiveMinimum": 0},
    "rope_theta_local": {"type": "number", "exclusiveMinimum": 0},
    "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "norm_eps": {"type": "number", "exclusiveMinimum": 0},
}

_PHASE = {
    "type": "object",
    "additionalProperties": False,
    "required": ["corpus", "sources", "peak_lr"],
    "properties": {
        "name": {"type": "string"},
        "corpus": {"type": "string"},
        "validation": {"type": "string"},
        "sources": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {"type": "number", "exclusiveMinimum": 0},
        },
        "mlm_probability": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "masking_seed": {"type": "integer"},
        "peak_lr": {"type": "number", "exclusiveMinimum": 0},
        "warmup": {"type": "number", "minimum": 0, "maximum": 1},
        "decay": {"type": "number", "minimum": 0, "maximum": 1},
        "decay_kind": {"enum": ["one_minus_sqrt", "constant_then_one_minus_sqrt"]},
        "constant_fraction": {"type": "number", "minimum": 0, "maximum": 1},
        "start_from": {"type": "string"},
        "batch_tokens": {"type": "integer", "minimum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "checkpoint_every": {"type": "integer", "minimum": 0},
        "steps": {"type": "integer", "minimum": 1},
    },
}

_TASK = {
    "type": "object",
    "additionalProperties": False,
    "required": ["task_id", "train", "val", "test"],
    "properties": {
        "task_id": {"type": "string", "minLength": 1},
        "preset": {"enum": sorted(LR_PRESETS)},
        "size": {"enum": ["base", "large"]},
        "kind": {"enum": ["single_label", "multi_label", "token_bio"]},
        "n_classes": {"type": "integer", "minimum": 1},
        "labels": {"type": "array", "items": {"type": "string"}, "minItems": 1},
        "train": {"type": "string"},
        "val": {"type": "string"},
        "test": {"type": "string"},
        "checkpoint": {"type": "string"},
        "lr_grid": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "epochs": {"type": "integer", "minimum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "weight_decay": {"type": "number", "minimum": 0},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1, "uniqueItems": True},
        "patience": {"type": "integer", "minimum": 1},
        "threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "max_len": {"type": "integer", "minimum": 3},
    },
}

_BENCH = copy.deepcopy(benchmod.WORKLOAD_SCHEMA)
_BENCH["properties"]["models"] = {
    "type": "object",
    "additionalProperties": {"type": "object", "additionalProperties": False, "properties": _MODEL_PROPS},
}
_BENCH["properties"]["workload_file"] = {"type": "string"}
_BENCH["properties"]["compare_backends"] = {"type": "boolean"}
_BENCH["required"] = []

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "bcmb RunConfig",
    "type": "object",
    "additionalProperties": False,
    "required": ["output_dir"],
    "properties": {
        "global_seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string", "minLength": 1},
        "tokenizer": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "corpus": {"type": "string"},
                "vocab_size": {"type": "integer", "minimum": 7},
                "path": {"type": "string"},
            },
        },
        "model": {"type": "object", "additionalProperties": False, "properties": _MODEL_PROPS},
        "phases": {"type": "array", "items": _PHASE},
        "tasks": {"type": "array", "items": _TASK},
        "bench": _BENCH,
    },
}


def schema_errors(doc: Any) -> list[str]:
    """Every schema violation as ``path: message``, sorted by path."""
    v = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    errs = sorted(v.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path])
    return [f"{'/'.join(map(str, e.absolute_path)) or '<root>'}: {e.message}" for e in errs]


# -- config loading ---------------------------------------------------------


def preset_names() -> list[str]:
    files = resources.files("bcmb") / "presets"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def load_config_source(source: str) -> dict:
    """A JSON file path or the name of a shipped preset."""
    path = Path(source)
    if path.is_file():
        text = path.read_text()
    elif source in preset_names():
        text = (resources.files("bcmb") / "presets" / f"{source}.json").read_text()
    else:
        raise ConfigError(f"config {source!r} is neither a file nor a preset ({', '.join(preset_names())})")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return doc


def apply_override(doc: dict, assignment: str) -> None:
    """``a.b.0.c=value``; the value is parsed as JSON, falling back to a plain string."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects path=value, got {assignment!r}")
    path, raw = assignment.split("=", 1)
    keys = path.split(".")
    if not path or any(not k for k in keys):
        raise ConfigError(f"--set: bad key path {path!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node: Any = doc
    for i, k in enumerate(keys):
        last = i == len(keys) - 1
        if isinstance(node, list):
            try:
                idx = int(k)
                node[idx]
            except (ValueError, IndexError):
                raise ConfigError(f"--set {path}: {k!r} is not a valid index") from None
            if last:
                node[idx] = value
            else:
                node = node[idx]
        elif isinstance(node, dict):
            if last:
                node[k] = value
            else:
                node = node.setdefault(k, {})
        else:
            raise ConfigError(f"--set {path}: cannot descend into a {type(node).__name__}")


def build_config(source: str | None, overrides: Sequence[str]) -> dict:
    doc = load_config_source(source) if source else {}
    for a in overrides:
        apply_override(doc, a)
    errors = schema_errors(doc)
    if errors:
        raise ConfigError("config invalid:\n  " + "\n  ".join(errors))
    return doc


def resolve_output_dir(doc: dict) -> Path:
    out = Path(doc["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def model_config(doc: dict, vocab_size: int | None = None) -> ModelConfig:
    fields = dict(doc.get("model", {}))
    if vocab_size is not None:
        if "vocab_size" in fields and fields["vocab_size"] != vocab_size:
            raise ConfigError(f"model.vocab_size={fields['vocab_size']} but the vocabulary has {vocab_size} entries")
        fields["vocab_size"] = vocab_size
    try:
        return ModelConfig(**fields)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


# -- manifest ---------------------------------------------------------------


def git_blob_hash(path: Path) -> str:
    """Content hash in git's blob form, so it matches ``git hash-object``."""
    data = path.read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _version(pkg: str) -> str:
    try:
        return metadata.version(pkg)
    except metadata.PackageNotFoundError:
        return "unknown"


def versions() -> dict:
    return {
        "bcmb": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "jsonschema": _version("jsonschema"),
        "scipy": _version("scipy"),
        "kernel_backend": kernels.BACKEND,
    }


class Run:
    """Output directory bookkeeping for one command invocation."""

    def __init__(self, command: str, argv: Sequence[str], doc: dict | None, out: Path | None):
        self.command = command
        self.argv = list(argv)
        self.doc = doc
        self.out = out
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def input(self, path: str | Path) -> Path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"referenced file {str(p)!r} does not exist")
        self.inputs[str(p)] = git_blob_hash(p)
        return p

    def path(self, name: str) -> Path:
        assert self.out is not None
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return self.out / name

    def write_manifest(self, status: str, exit_code: int, error: str | None) -> None:
        if self.out is None:
            return
        self.out.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": self.command,
            "argv": self.argv,
            "status": status,
            "exit_code": exit_code,
            "error": error,
            "config": self.doc,
            "inputs": self.inputs,
            "outputs": sorted(set(self.outputs)),
            "versions": versions(),
        }
        (self.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- shared steps -----------------------------------------------------------


def _vocab(run: Run, doc: dict, train_if_missing: bool = True) -> Vocab:
    tok = doc.get("tokenizer", {})
    if "path" in tok:
        return Vocab.load(run.input(tok["path"]))
    saved = run.out / "vocab.txt" if run.out is not None else None
    if saved is not None and saved.is_file():
        run.inputs[str(saved)] = git_blob_hash(saved)
        return Vocab.load(saved)
    if not train_if_missing:
        raise ConfigError("no vocabulary: set tokenizer.path or run vocab-train first")
    return _train_vocab(run, doc)


def _train_vocab(run: Run, doc: dict) -> Vocab:
    tok = doc.get("tokenizer", {})
    if "corpus" not in tok or "vocab_size" not in tok:
        raise ConfigError("tokenizer.corpus and tokenizer.vocab_size are required to train a vocabulary")
    corpus = read_corpus(run.input(tok["corpus"]))
    texts = [t for src in sorted(corpus) for t in corpus[src]]
    try:
        vocab = train_vocab(texts, tok["vocab_size"])
    except ValueError as exc:
        raise ConfigError(f"tokenizer: {exc}") from None
    vocab.save(run.path("vocab.txt"))
    return vocab


def _phase_spec(i: int, ph: dict) -> PhaseSpec:
    schedule = {"peak_lr": ph["peak_lr"]}
    for k in ("warmup", "decay", "decay_kind", "constant_fraction"):
        if k in ph:
            schedule[k] = ph[k]
    try:
        return PhaseSpec(
            tuple((str(s), float(e)) for s, e in ph["sources"].items()),
            MaskingSpec(ph.get("mlm_probability", 0.30), seed=ph.get("masking_seed", 0)),
            schedule,
            ph.get("start_from", "fresh" if i == 0 else "previous"),
            ph.get("batch_tokens", 2048),
            ph.get("weight_decay", 1e-5),
            ph.get("name", f"phase{i + 1}"),
        )
    except ValueError as exc:
        raise ConfigError(f"phases/{i}: {exc}") from None


def _plan(doc: dict) -> PhasePlan:
    phases = doc.get("phases") or []
    if not phases:
        raise ConfigError("config has no phases")
    try:
        return PhasePlan(tuple(_phase_spec(i, ph) for i, ph in enumerate(phases)), doc.get("global_seed", 0))
    except ValueError as exc:
        raise ConfigError(f"phases: {exc}") from None


def _corpora(run: Run, path: str, vocab: Vocab, max_len: int, cache: dict) -> dict[str, list[np.ndarray]]:
    if path not in cache:
        raw = read_corpus(run.input(path))
        cache[path] = {src: encode_documents(texts, vocab, max_len) for src, texts in raw.items()}
    return cache[path]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- subcommands ------------------------------------------------------------


def cmd_vocab_train(args, run: Run, doc: dict) -> None:
    vocab = _train_vocab(run, doc)
    print(f"vocabulary of {vocab.size} entries -> {run.out / 'vocab.txt'}")


def cmd_pretrain(args, run: Run, doc: dict) -> None:
    vocab = _vocab(run, doc)
    cfg = model_config(doc, vocab.size)
    plan = _plan(doc)
    model = EncoderModel.init(cfg, doc.get("global_seed", 0))
    ck_dir = run.out / "checkpoints"
    ck_dir.mkdir(parents=True, exist_ok=True)
    cache: dict = {}
    moments = Moments()
    gstep = 0
    log_path = run.path("pretrain_loss.csv")
    eval_rows = []
    write_loss_log(log_path, [])
    for i, ph in enumerate(doc["phases"]):
        spec = plan.phases[i]
        if spec.start_from == "fresh" and i:
            model = EncoderModel.init(cfg, doc.get("global_seed", 0))
            moments, gstep = Moments(), 0
        elif spec.start_from not in ("fresh", "previous"):
            ck = load_checkpoint(run.input(spec.start_from))
            model = ck.to_model(expect=cfg)
            moments, gstep = ck.copy_moments(), ck.global_step
        corpora = _corpora(run, ph["corpus"], vocab, cfg.max_seq_len, cache)
        res = run_phase(
            plan,
            i,
            model,
            corpora,
            moments=moments,
            start_global_step=gstep,
            checkpoint_every=ph.get("checkpoint_every", 0),
            checkpoint_dir=ck_dir,
        )
        run.outputs.extend(str(p.relative_to(run.out)) for p in res.saved)
        write_loss_log(log_path, res.log, append=True)
        moments, gstep = res.checkpoint.copy_moments(), res.checkpoint.global_step
        if "validation" in ph:
            val = _corpora(run, ph["validation"], vocab, cfg.max_seq_len, cache)
            for src in sorted(val):
                loss = evaluate_mlm_loss(model, val[src], spec.masking)
                eval_rows.append((i + 1, spec.name, src, repr(loss)))
        print(f"phase {i + 1} ({spec.name}): {len(res.log)} steps, final loss {res.log[-1].loss:.4f}")
    if eval_rows:
        _write_csv(run.path("pretrain_eval.csv"), ("phase", "phase_name", "source", "mlm_loss"), eval_rows)


def _task_spec(t: dict, records: list[dict]) -> TaskSpec:
    kind, n_classes = t.get("kind"), t.get("n_classes", 0)
    lr_grid = t.get("lr_grid")
    if "preset" in t:
        pk, pn = TASK_KIND_PRESETS[t["preset"]]
        kind = kind or pk
        n_classes = n_classes or (pn or 0)
        lr_grid = lr_grid or [LR_PRESETS[t["preset"]][t.get("size", "base")]]
    if kind is None:
        raise ConfigError(f"task {t['task_id']}: kind or preset is required")
    labels = tuple(t.get("labels", ())) or (bio_label_set(records) if kind == "token_bio" else ())
    kw = {k: t[k] for k in ("epochs", "batch_size", "weight_decay", "patience", "threshold", "max_len") if k in t}
    if "seeds" in t:
        kw["seeds"] = tuple(t["seeds"])
    try:
        return TaskSpec(kind, n_classes, labels, tuple(lr_grid or (5e-5,)), task_id=t["task_id"], **kw)
    except ValueError as exc:
        raise ConfigError(f"task {t['task_id']}: {exc}") from None


def _final_checkpoint(run: Run, doc: dict) -> Path:
    n = len(doc.get("phases") or [])
    if not n:
        raise ConfigError("no checkpoint given and no phases to locate one")
    return run.out / "checkpoints" / f"phase{n}_final.ckpt"


def cmd_finetune(args, run: Run, doc: dict) -> None:
    tasks = doc.get("tasks") or []
    if not tasks:
        raise ConfigError("config has no tasks")
    vocab = _vocab(run, doc, train_if_missing=False)
    reports: list[MetricReport] = []
    details = {}
    for t in tasks:
        ck = load_checkpoint(run.input(t.get("checkpoint") or _final_checkpoint(run, doc)))
        model = ck.to_model()
        if model.config.vocab_size != vocab.size:
            raise ConfigError(f"task {t['task_id']}: checkpoint vocabulary {model.config.vocab_size} != {vocab.size}")
        splits = {k: read_jsonl(run.input(t[k])) for k in ("train", "val", "test")}
        spec = _task_spec(t, splits["train"])
        rep = finetune(model, spec, vocab, splits, model_name=Path(doc["output_dir"]).name)
        reports.append(rep)
        details[spec.task_id] = {
            "metric": rep.metric,
            "chosen_lr": rep.chosen_lr,
            "grid": {repr(k): v for k, v in rep.grid.items()},
            "per_seed": rep.per_seed,
            "median": rep.median,
            "runs": [dataclasses.asdict(r) for r in rep.runs],
        }
        print(f"{spec.task_id}: {rep.metric} median {rep.median:.4f} over seeds {list(rep.per_seed)} (lr {rep.chosen_lr:g})")
    write_report(run.path("finetune_report.csv"), reports)
    run.path("finetune_details.json").write_text(json.dumps(details, indent=2, sort_keys=True) + "\n")


def cmd_eval(args, run: Run, doc: dict | None) -> None:
    if args.gold or args.pred:
        if not (args.gold and args.pred):
            raise ConfigError("--gold and --pred go together")
        gold = read_jsonl(run.input(args.gold))
        pred = read_jsonl(run.input(args.pred))
        if len(gold) != len(pred):
            raise DataError(f"{len(gold)} gold records vs {len(pred)} predictions")
        try:
            if args.kind == "token_bio":
                prf = entity_f1([r["tags"] for r in gold], [r["tags"] for r in pred])
                rows = [("precision", repr(prf.precision)), ("recall", repr(prf.recall)), ("entity_f1", repr(prf.f1))]
            else:
                key = "label" if args.kind == "single_label" else "labels"
                value = weighted_f1(
                    np.array([r[key] for r in gold]), np.array([r[key] for r in pred]), args.kind
                )
                rows = [("weighted_f1", repr(value))]
        except KeyError as exc:
            raise DataError(f"record without field {exc}") from None
        for k, v in rows:
            print(f"{k}\t{v}")
        if run.out is not None:
            _write_csv(run.path("eval_metrics.csv"), ("metric", "value"), rows)
        return
    if doc is None:
        raise ConfigError("eval needs --gold/--pred or a config with validation corpora")
    vocab = _vocab(run, doc, train_if_missing=False)
    ck_path = args.checkpoint or _final_checkpoint(run, doc)
    model = load_checkpoint(run.input(ck_path)).to_model()
    cache: dict = {}
    rows = []
    for i, ph in enumerate(doc.get("phases") or []):
        if "validation" not in ph:
            continue
        masking = MaskingSpec(ph.get("mlm_probability", 0.30), seed=ph.get("masking_seed", 0))
        val = _corpora(run, ph["validation"], vocab, model.config.max_seq_len, cache)
        for src in sorted(val):
            rows.append((i + 1, src, repr(masking.mlm_probability), repr(evaluate_mlm_loss(model, val[src], masking))))
    if not rows:
        raise ConfigError("no phase defines a validation corpus")
    for r in rows:
        print("\t".join(map(str, r)))
    _write_csv(run.path("mlm_eval.csv"), ("phase", "source", "mlm_probability", "mlm_loss"), rows)


def cmd_bench(args, run: Run, doc: dict) -> None:
    section = dict(doc.get("bench") or {})
    if "workload_file" in section:
        file_doc = json.loads(run.input(section.pop("workload_file")).read_text())
        section = {**file_doc, **{k: v for k, v in section.items() if k != "workloads"}}
    section.pop("compare_backends", None)
    models_cfg = section.pop("models", None) or {"model": {}}
    try:
        plan = benchmod.parse_bench_plan(section)
    except ValueError as exc:
        raise ConfigError(f"bench: {exc}") from None
    base = model_config(doc).to_dict()
    models = {}
    contexts = {}
    for name, over in models_cfg.items():
        try:
            cfg = ModelConfig.from_dict({**base, **over})
        except ValueError as exc:
            raise ConfigError(f"bench.models.{name}: {exc}") from None
        models[name] = EncoderModel.init(cfg, doc.get("global_seed", 0))
        contexts[name] = cfg.max_seq_len
    results = benchmod.run_plan(models, plan)
    benchmod.write_results_csv(run.path("bench.csv"), results)
    classes = {s.workload_class: s.max_len for s in plan.workloads}
    rows = benchmod.table(results, contexts, classes)
    benchmod.write_table_csv(run.path("bench_table.csv"), rows)
    meta = benchmod.results_metadata(results)
    if (doc.get("bench") or {}).get("compare_backends"):
        spec = plan.workloads[0]
        name, model = next(iter(models.items()))
        docs = benchmod.generate_workload(spec, model.config.vocab_size)
        meta["backends"] = {"model": name, "workload": spec.workload_id, **benchmod.compare_backends(model, docs, plan.runs)}
    run.path("bench_meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(benchmod.write_table_csv(None, rows), end="")


_SCHEDULE_HEADER = ("phase", "step", "stage", "lr")


def _schedule_rows(phase: int, spec: SchedulerSpec) -> list[tuple]:
    rows = []
    for s in range(spec.total_steps + 1):
        if s < spec.warmup_steps:
            stage = "warmup"
        elif s < spec.warmup_steps + spec.stable_steps:
            stage = "stable"
        else:
            stage = "decay"
        rows.append((phase, s, stage, repr(lr_at(spec, s))))
    return rows


def cmd_schedule_dump(args, run: Run, doc: dict | None) -> None:
    rows: list[tuple] = []
    if args.variant:
        peak = args.peak_lr if args.peak_lr is not None else (PEAK_LR_BASE if args.variant == "base" else PEAK_LR_LARGE)
        spec = phase2_base(peak, args.steps) if args.variant == "base" else phase2_large(peak, args.steps)
        rows = _schedule_rows(2, spec)
    else:
        if doc is None:
            raise ConfigError("schedule-dump needs --variant or a config with phases")
        plan = _plan(doc)
        vocab = None
        cache: dict = {}
        for i, ph in enumerate(doc["phases"]):
            if "steps" in ph:
                total = ph["steps"]
            else:
                vocab = vocab or _vocab(run, doc)
                cfg = model_config(doc, vocab.size)
                total = len(plan.batches(i, _corpora(run, ph["corpus"], vocab, cfg.max_seq_len, cache)))
            try:
                rows.extend(_schedule_rows(i + 1, plan.phases[i].resolve_schedule(total)))
            except ValueError as exc:
                raise ConfigError(f"phases/{i}: {exc}") from None
    if run.out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(_SCHEDULE_HEADER)
        w.writerows(rows)
    else:
        path = run.path("schedule.csv")
        _write_csv(path, _SCHEDULE_HEADER, rows)
        print(f"{len(rows)} rows -> {path}")


def cmd_checkpoint_inspect(args, run: Run, doc: dict | None) -> None:
    ck = load_checkpoint(run.input(args.checkpoint))
    print(json.dumps(ck.header(), indent=2, sort_keys=True))


def cmd_synth_data(args, run: Run, doc: dict | None) -> None:
    """Synthetic two-domain corpus plus a separable NER task, laid out as the presets expect."""
    out = Path(args.directory)
    out.mkdir(parents=True, exist_ok=True)
    corp = two_domain_corpora(n_train=args.n_train, n_val=args.n_val, seed=args.seed)
    write_corpus(out / "corpus.jsonl", ((src, t) for src in sorted(corp) for t in corp[src]["train"]))
    write_corpus(out / "corpus_val.jsonl", ((src, t) for src in sorted(corp) for t in corp[src]["val"]))
    recs = separable_ner(args.n_ner, seed=args.seed + 1)
    a, b = int(len(recs) * 2 / 3), int(len(recs) * 5 / 6)
    for name, part in (("train", recs[:a]), ("val", recs[a:b]), ("test", recs[b:])):
        with open(out / f"ner_{name}.jsonl", "w") as fh:
            for r in part:
                fh.write(json.dumps(r) + "\n")
    print(f"wrote synthetic data to {out}")


# -- argument parsing -------------------------------------------------------

_NEEDS_CONFIG = {"vocab-train", "pretrain", "finetune", "bench"}
_COMMANDS = {
    "vocab-train": cmd_vocab_train,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "schedule-dump": cmd_schedule_dump,
    "checkpoint-inspect": cmd_checkpoint_inspect,
    "synth-data": cmd_synth_data,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcmb", description="Long-context encoder workbench.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required: bool):
        sp.add_argument("--config", "-c", required=required, help="RunConfig JSON file or preset name")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE")

    for name, helptext in (
        ("vocab-train", "train the BPE vocabulary"),
        ("pretrain", "run every pretraining phase"),
        ("finetune", "fine-tune and evaluate every task"),
        ("bench", "inference throughput benchmark"),
    ):
        with_config(sub.add_parser(name, help=helptext), required=True)
    sp = sub.add_parser("eval", help="score predictions or a checkpoint's validation MLM loss")
    with_config(sp, required=False)
    sp.add_argument("--gold")
    sp.add_argument("--pred")
    sp.add_argument("--kind", choices=["token_bio", "single_label", "multi_label"], default="token_bio")
    sp.add_argument("--checkpoint")
    sp = sub.add_parser("schedule-dump", help="learning-rate curve as CSV")
    with_config(sp, required=False)
    sp.add_argument("--variant", choices=["base", "large"], help="standalone second-phase curve")
    sp.add_argument("--steps", type=int, default=1000)
    sp.add_argument("--peak-lr", type=float)
    sp = sub.add_parser("checkpoint-inspect", help="print a checkpoint header")
    sp.add_argument("checkpoint")
    sp = sub.add_parser("synth-data", help="write the synthetic inputs used by the presets")
    sp.add_argument("directory", nargs="?", default="data")
    sp.add_argument("--n-train", type=int, default=400)
    sp.add_argument("--n-val", type=int, default=60)
    sp.add_argument("--n-ner", type=int, default=360)
    sp.add_argument("--seed", type=int, default=0)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    run = Run(args.command, argv, None, None)
    code, status, error = EXIT_OK, "ok", None
    try:
        config_src = getattr(args, "config", None)
        overrides = getattr(args, "overrides", [])
        if config_src or overrides:
            raw = load_config_source(config_src) if config_src else {}
            for a in overrides:
                apply_override(raw, a)
            run.doc = raw
            if isinstance(raw.get("output_dir"), str) and raw["output_dir"]:
                run.out = resolve_output_dir(raw)
            errors = schema_errors(raw)
            if errors:
                raise ConfigError("config invalid:\n  " + "\n  ".join(errors))
        elif args.command in _NEEDS_CONFIG:
            raise ConfigError(f"{args.command} needs --config")
        with threadpool_limits(limits=1):
            _COMMANDS[args.command](args, run, run.doc)
    except ConfigError as exc:
        code, error = EXIT_CONFIG, str(exc)
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        code, error = EXIT_DATA, str(exc)
    except (NumericError, FloatingPointError) as exc:
        code, error = EXIT_NUMERIC, str(exc)
    except ValueError as exc:
        code, error = EXIT_CONFIG, str(exc)
        log.debug("%s", traceback.format_exc())
    except Exception as exc:  # still leave a manifest behind
        code, error = 1, f"{type(exc).__name__}: {exc}"
        log.error("%s", traceback.format_exc())
    if code:
        status = "error"
        first, _, rest = error.partition("\n")
        print(f"bcmb {args.command}: {first}", file=sys.stderr)
        if rest:
            print(rest, file=sys.stderr)
    run.write_manifest(status, code, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
