"""Binary checkpoint format.

Layout (little-endian)::

    b"BCMB" | u32 version | u32 n | n bytes JSON ModelConfig
    | u32 count | count x tensor                      (model parameters)
    | u32 count | count x tensor                      (optimizer moments, "m/<name>", "v/<name>")
    | u32 n | n bytes JSON state                      (phase, steps, rng states, heads)

    tensor := u32 name_len | name utf-8 | u32 rank | rank x u32 extent | float32 payload
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..model import EncoderModel, HeadSpec, ModelConfig
from ..numerics import Tensor
from .optim import Moments

MAGIC = b"BCMB"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, np.ndarray]
    moments: Moments = field(default_factory=Moments)
    phase: int = 1
    global_step: int = 0
    phase_step: int = 0
    rng_state: dict | None = None
    heads: dict[str, HeadSpec] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model: EncoderModel, moments: Moments | None = None, **kw) -> "Checkpoint":
        params = {n: t.data.astype(np.float32, copy=True) for n, t in model.params.items()}
        mom = moments or Moments()
        mom = Moments(mom.step, {k: v.copy() for k, v in mom.m.items()}, {k: v.copy() for k, v in mom.v.items()})
        return cls(model.config, params, mom, heads=dict(model.heads), **kw)

    def to_model(self, expect: ModelConfig | None = None) -> EncoderModel:
        if expect is not None and expect != self.config:
            raise CheckpointError(f"checkpoint config {self.config} does not match expected {expect}")
        tensors = {n: Tensor(a.copy(), requires_grad=True, name=n) for n, a in self.params.items()}
        return EncoderModel(self.config, tensors, self.heads)

    def copy_moments(self) -> Moments:
        m = self.moments
        return Moments(m.step, {k: v.copy() for k, v in m.m.items()}, {k: v.copy() for k, v in m.v.items()})

    def header(self) -> dict:
        return {
            "format_version": self.version,
            "phase": self.phase,
            "global_step": self.global_step,
            "phase_step": self.phase_step,
            "n_parameters": int(sum(a.size for a in self.params.values())),
            "optimizer_step": self.moments.step,
            "heads": {k: [v.kind, v.n_classes] for k, v in self.heads.items()},
            "config": self.config.to_dict(),
            "meta": self.meta,
        }


def _write_tensors(buf: io.BufferedIOBase, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_exact(buf, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_u32(buf) -> int:
    return struct.unpack("<I", _read_exact(buf, 4))[0]


def _read_tensors(buf) -> dict[str, np.ndarray]:
    out = {}
    for _ in range(_read_u32(buf)):
        name = _read_exact(buf, _read_u32(buf)).decode("utf-8")
        rank = _read_u32(buf)
        shape = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(_read_exact(buf, 4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    return out


def _write_blob(buf, obj) -> None:
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        _write_blob(fh, ckpt.config.to_dict())
        _write_tensors(fh, ckpt.params)
        opt = {f"m/{k}": v for k, v in ckpt.moments.m.items()}
        opt.update({f"v/{k}": v for k, v in ckpt.moments.v.items()})
        _write_tensors(fh, opt)
        _write_blob(
            fh,
            {
                "phase": ckpt.phase,
                "global_step": ckpt.global_step,
                "phase_step": ckpt.phase_step,
                "optimizer_step": ckpt.moments.step,
                "rng": ckpt.rng_state,
                "heads": {k: [v.kind, v.n_classes] for k, v in ckpt.heads.items()},
                "meta": ckpt.meta,
            },
        )
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a checkpoint")
        version = _read_u32(fh)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        config = ModelConfig.from_dict(json.loads(_read_exact(fh, _read_u32(fh))))
        params = _read_tensors(fh)
        opt = _read_tensors(fh)
        state = json.loads(_read_exact(fh, _read_u32(fh)))
    moments = Moments(
        int(state["optimizer_step"]),
        {k[2:]: v for k, v in opt.items() if k.startswith("m/")},
        {k[2:]: v for k, v in opt.items() if k.startswith("v/")},
    )
    return Checkpoint(
        config,
        params,
        moments,
        phase=int(state["phase"]),
        global_step=int(state["global_step"]),
        phase_step=int(state["phase_step"]),
        rng_state=state.get("rng"),
        heads={k: HeadSpec(v[0], int(v[1])) for k, v in state.get("heads", {}).items()},
        meta=state.get("meta", {}),
        version=version,
    )
