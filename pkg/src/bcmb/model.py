"""Bidirectional encoder with RoPE and alternating global / sliding-window attention."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import kernels
from . import numerics as nx
from .numerics import Tensor
from .packing import PackedBatch, PaddedBatch

HEAD_KINDS = ("single_label", "multi_label", "token_label")

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    vocab_size: int = 512
    max_seq_len: int = 512
    window: int = 128
    global_period: int = 3
    rope_theta_global: float = 160_000.0
    rope_theta_local: float = 10_000.0
    dropout: float = 0.1
    norm_eps: float = 1e-5

    def __post_init__(self):
        problems = []
        if self.n_layers < 1:
            problems.append("n_layers must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            problems.append(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        elif (self.d_model // self.n_heads) % 2:
            problems.append(f"head_dim={self.d_model // self.n_heads} must be even for RoPE")
        if self.window < 0 or self.window % 2:
            problems.append(f"window={self.window} must be a non-negative even number")
        if self.window > self.max_seq_len:
            problems.append(f"window={self.window} exceeds max_seq_len={self.max_seq_len}")
        if self.global_period < 1:
            problems.append("global_period must be >= 1")
        if self.rope_theta_global <= 0 or self.rope_theta_local <= 0:
            problems.append("rope thetas must be positive")
        if not 0.0 <= self.dropout < 1.0:
            problems.append("dropout must be in [0, 1)")
        if problems:
            raise ValueError("invalid ModelConfig: " + "; ".join(problems))

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def is_global(self, layer: int) -> bool:
        return layer % self.global_period == 0

    def global_layers(self) -> list[int]:
        return [l for l in range(self.n_layers) if self.is_global(l)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class HeadSpec:
    kind: str
    n_classes: int


class EncoderModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], heads: dict[str, HeadSpec] | None = None):
        self.config = config
        self.params = params
        self.heads = dict(heads or {})
        self._check_shapes()

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0, zero_mlm_head: bool = False) -> "EncoderModel":
        rng = np.random.default_rng(seed)
        return cls(config, {n: Tensor(a, requires_grad=True, name=n) for n, a in _init_arrays(config, rng, zero_mlm_head)})

    def attach_head(self, name: str, kind: str, n_classes: int, seed: int = 0) -> None:
        if kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {kind!r}")
        if n_classes < 1:
            raise ValueError("a head needs at least one class")
        rng = np.random.default_rng(seed)
        d = self.config.d_model
        dt = self.dtype
        self.params[f"head.{name}.weight"] = Tensor(
            (rng.standard_normal((d, n_classes)) * 0.02).astype(dt), requires_grad=True, name=f"head.{name}.weight"
        )
        self.params[f"head.{name}.bias"] = Tensor(np.zeros(n_classes, dt), requires_grad=True, name=f"head.{name}.bias")
        self.heads[name] = HeadSpec(kind, n_classes)

    def _check_shapes(self) -> None:
        expected = dict(_param_shapes(self.config))
        for name, shape in expected.items():
            if name not in self.params:
                raise ValueError(f"missing parameter {name}")
            if self.params[name].shape != shape:
                raise ValueError(f"parameter {name} has shape {self.params[name].shape}, config implies {shape}")
        for name, spec in self.heads.items():
            w = self.params.get(f"head.{name}.weight")
            if w is None or w.shape != (self.config.d_model, spec.n_classes):
                raise ValueError(f"head {name!r} parameters inconsistent with {spec}")

    # -- helpers ------------------------------------------------------------

    @property
    def dtype(self):
        return self.params["embed.tok"].dtype

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(sorted(self.params.items()))

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self, dtype=None) -> "EncoderModel":
        params = {
            n: Tensor(t.data.astype(dtype or t.dtype, copy=True), requires_grad=True, name=n) for n, t in self.params.items()
        }
        return EncoderModel(self.config, params, self.heads)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for n, a in arrays.items():
            if n not in self.params or self.params[n].shape != a.shape:
                raise ValueError(f"state entry {n} does not fit this model")
            self.params[n].data = np.array(a, dtype=self.dtype)


def _param_shapes(cfg: ModelConfig):
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    yield "embed.tok", (V, d)
    yield "embed.norm.g", (d,)
    yield "embed.norm.b", (d,)
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        yield p + "attn_norm.g", (d,)
        yield p + "attn_norm.b", (d,)
        yield p + "wqkv", (d, 3 * d)
        yield p + "bqkv", (3 * d,)
        yield p + "wo", (d, d)
        yield p + "bo", (d,)
        yield p + "mlp_norm.g", (d,)
        yield p + "mlp_norm.b", (d,)
        yield p + "w1", (d, f)
        yield p + "b1", (f,)
        yield p + "w2", (f, d)
        yield p + "b2", (d,)
    yield "final_norm.g", (d,)
    yield "final_norm.b", (d,)
    yield "mlm.weight", (d, V)
    yield "mlm.bias", (V,)


def _init_arrays(cfg: ModelConfig, rng: np.random.Generator, zero_mlm_head: bool):
    out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    for name, shape in _param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            a = np.ones(shape)
        elif len(shape) == 1 or (zero_mlm_head and name == "mlm.weight"):
            a = np.zeros(shape)
        elif leaf in ("wo", "w2"):
            a = rng.standard_normal(shape) * out_std
        else:
            a = rng.standard_normal(shape) * 0.02
        yield name, a.astype(np.float32)


# -- rotary embeddings ------------------------------------------------------


def rope_angles(positions, head_dim: int, theta: float) -> np.ndarray:
    """Angle table ``[len(positions), head_dim // 2]`` (float64)."""
    if head_dim % 2:
        raise ValueError(f"RoPE needs an even head_dim, got {head_dim}")
    inv_freq = theta ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def _rotate(x: np.ndarray, ang: np.ndarray, inverse: bool = False) -> np.ndarray:
    # ang broadcasts against x[..., seq, head_dim // 2]
    cos = np.cos(ang).astype(x.dtype)
    sin = np.sin(ang).astype(x.dtype)
    if inverse:
        sin = -sin
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def rope_rotate(x, positions, theta: float):
    """Rotate each (2i, 2i+1) pair of ``x[..., seq, head_dim]`` by ``pos * theta^(-2i/head_dim)``.

    Accepts an array or a Tensor; a Tensor input is differentiable.
    """
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if arr.shape[-1] % 2:
        raise ValueError(f"RoPE needs an even head_dim, got {arr.shape[-1]}")
    if arr.shape[-2] != len(positions):
        raise nx.ShapeError(f"rope_rotate: {len(positions)} positions for sequence axis of {arr.shape}")
    ang = rope_angles(positions, arr.shape[-1], theta)
    out = _rotate(arr, ang)
    if not isinstance(x, Tensor):
        return out
    return nx.record(out, (x,), lambda g: (_rotate(g, ang, inverse=True),))


# -- attention --------------------------------------------------------------


def half_window(config: ModelConfig, layer: int) -> int:
    """Reach of a layer's attention in tokens; -1 means unrestricted."""
    return -1 if config.is_global(layer) else config.window // 2


def attention_mask(positions_a, positions_b, hw: int) -> np.ndarray:
    """Boolean reachability between two position lists of the same sequence."""
    dist = np.abs(np.asarray(positions_a)[:, None] - np.asarray(positions_b)[None, :])
    return np.ones(dist.shape, dtype=bool) if hw < 0 else dist <= hw


def _rope_tables(batch: PackedBatch, config: ModelConfig, layer: int) -> np.ndarray:
    theta = config.rope_theta_global if config.is_global(layer) else config.rope_theta_local
    # [T, 1, head_dim/2] broadcasts over heads in the [T, H, hd] layout
    return rope_angles(batch.positions, config.head_dim, theta)[:, None, :]


def attention_core(qkv: Tensor, batch: PackedBatch, config: ModelConfig, layer: int) -> Tensor:
    """RoPE + masked softmax attention on a packed ``[T, 3*d_model]`` projection.

    Forward runs through the kernel backend; backward recomputes each
    sequence's probabilities densely.
    """
    T = batch.n_tokens
    H, hd = config.n_heads, config.head_dim
    if qkv.shape != (T, 3 * config.d_model):
        raise nx.ShapeError(f"attention: qkv {qkv.shape} vs expected {(T, 3 * config.d_model)}")
    hw = half_window(config, layer)
    ang = _rope_tables(batch, config, layer)
    parts = qkv.data.reshape(T, 3, H, hd)
    q = _rotate(parts[:, 0], ang)
    k = _rotate(parts[:, 1], ang)
    v = np.ascontiguousarray(parts[:, 2])
    scale = 1.0 / math.sqrt(hd)
    if batch.key_lengths is not None and nx.active_tape() is not None:
        raise ValueError("padded views are inference-only; pack the batch to train")
    out = kernels.varlen_attention(q, k, v, batch.cu_seqlens, hw, scale, batch.key_lengths)
    cu = batch.cu_seqlens
    pos = batch.positions

    def bwd(g):
        g = g.reshape(T, H, hd)
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        for s in range(len(cu) - 1):
            a, b = cu[s], cu[s + 1]
            Q, K, V, G = (t[a:b].transpose(1, 0, 2) for t in (q, k, v, g))
            S = np.matmul(Q, K.transpose(0, 2, 1)) * q.dtype.type(scale)
            allowed = attention_mask(pos[a:b], pos[a:b], hw)
            S = np.where(allowed, S, -np.inf)
            S -= S.max(axis=-1, keepdims=True)
            P = np.exp(S)
            P /= P.sum(axis=-1, keepdims=True)
            dV = np.matmul(P.transpose(0, 2, 1), G)
            dP = np.matmul(G, V.transpose(0, 2, 1))
            dS = P * (dP - (dP * P).sum(axis=-1, keepdims=True)) * q.dtype.type(scale)
            dq[a:b] = np.matmul(dS, K).transpose(1, 0, 2)
            dk[a:b] = np.matmul(dS.transpose(0, 2, 1), Q).transpose(1, 0, 2)
            dv[a:b] = dV.transpose(1, 0, 2)
        dqkv = np.stack([_rotate(dq, ang, inverse=True), _rotate(dk, ang, inverse=True), dv], axis=1)
        return (dqkv.reshape(T, 3 * H * hd),)

    return nx.record(out.reshape(T, H * hd), (qkv,), bwd)


def attention_layer(x: Tensor, layer: int, batch: PackedBatch, model: "EncoderModel") -> Tensor:
    """Pre-norm attention sub-block of ``layer`` (without the residual add)."""
    cfg = model.config
    if not 0 <= layer < cfg.n_layers:
        raise IndexError(f"layer index {layer} outside [0, {cfg.n_layers})")
    p = model.params
    pre = f"layers.{layer}."
    h = nx.layer_norm(x, p[pre + "attn_norm.g"], p[pre + "attn_norm.b"], cfg.norm_eps)
    qkv = nx.add(nx.matmul(h, p[pre + "wqkv"]), p[pre + "bqkv"])
    a = attention_core(qkv, batch, cfg, layer)
    return nx.add(nx.matmul(a, p[pre + "wo"]), p[pre + "bo"])


def attention_probabilities(model: "EncoderModel", batch: PackedBatch, layer: int, x: np.ndarray | None = None) -> list[np.ndarray]:
    """Per-sequence attention weights ``[heads, n, n]`` of one layer (inspection helper).

    ``x`` is the layer input; defaults to the embedding output.
    """
    cfg = model.config
    p = model.params
    if x is None:
        x = _embed(model, batch, None).data
    pre = f"layers.{layer}."
    h = nx.layer_norm(Tensor(x), p[pre + "attn_norm.g"], p[pre + "attn_norm.b"], cfg.norm_eps).data
    parts = (h @ p[pre + "wqkv"].data + p[pre + "bqkv"].data).reshape(len(x), 3, cfg.n_heads, cfg.head_dim)
    ang = _rope_tables(batch, cfg, layer)
    q, k = _rotate(parts[:, 0], ang), _rotate(parts[:, 1], ang)
    hw = half_window(cfg, layer)
    out = []
    for s in range(batch.n_seqs):
        a, b = batch.cu_seqlens[s], batch.cu_seqlens[s + 1]
        S = np.matmul(q[a:b].transpose(1, 0, 2), k[a:b].transpose(1, 2, 0)) / math.sqrt(cfg.head_dim)
        S = np.where(attention_mask(batch.positions[a:b], batch.positions[a:b], hw), S, -np.inf)
        S = np.exp(S - S.max(axis=-1, keepdims=True))
        out.append(S / S.sum(axis=-1, keepdims=True))
    return out


# -- forward passes ---------------------------------------------------------


def _embed(model: EncoderModel, batch: PackedBatch, rng) -> Tensor:
    cfg = model.config
    p = model.params
    ids = batch.token_ids
    if ids.size == 0:
        raise ValueError("empty batch")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab_size})")
    x = nx.embedding_lookup(p["embed.tok"], ids)
    x = nx.layer_norm(x, p["embed.norm.g"], p["embed.norm.b"], cfg.norm_eps)
    return nx.dropout(x, cfg.dropout, rng)


def encode(model: EncoderModel, batch: PackedBatch, rng: np.random.Generator | None = None) -> Tensor:
    """Final hidden states ``[tokens, d_model]``. Dropout is active only when ``rng`` is given."""
    cfg = model.config
    if batch.max_seqlen > cfg.max_seq_len:
        raise ValueError(f"sequence of {batch.max_seqlen} tokens exceeds max_seq_len={cfg.max_seq_len}")
    p = model.params
    x = _embed(model, batch, rng)
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        a = attention_layer(x, l, batch, model)
        x = nx.add(x, nx.dropout(a, cfg.dropout, rng))
        h = nx.layer_norm(x, p[pre + "mlp_norm.g"], p[pre + "mlp_norm.b"], cfg.norm_eps)
        h = nx.gelu(nx.add(nx.matmul(h, p[pre + "w1"]), p[pre + "b1"]))
        h = nx.add(nx.matmul(h, p[pre + "w2"]), p[pre + "b2"])
        x = nx.add(x, nx.dropout(h, cfg.dropout, rng))
    return nx.layer_norm(x, p["final_norm.g"], p["final_norm.b"], cfg.norm_eps)


def mlm_logits(model: EncoderModel, hidden: Tensor) -> Tensor:
    return nx.add(nx.matmul(hidden, model.params["mlm.weight"]), model.params["mlm.bias"])


def forward_mlm(model: EncoderModel, batch: PackedBatch, rng: np.random.Generator | None = None) -> Tensor:
    """Vocabulary logits, one row per packed token."""
    return mlm_logits(model, encode(model, batch, rng))


def forward_classify(
    model: EncoderModel,
    batch: PackedBatch,
    head: str,
    n_classes: int | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Head logits: one row per sequence (CLS position) or per token for ``token_label``."""
    spec = model.heads.get(head)
    if spec is None:
        raise KeyError(f"no head named {head!r}; attached: {sorted(model.heads)}")
    if n_classes is not None and n_classes != spec.n_classes:
        raise ValueError(f"head {head!r} has {spec.n_classes} classes, caller expects {n_classes}")
    x = encode(model, batch, rng)
    if spec.kind != "token_label":
        x = nx.take_rows(x, batch.seq_starts)
    return nx.add(nx.matmul(x, model.params[f"head.{head}.weight"]), model.params[f"head.{head}.bias"])


# -- padded execution (baseline and oracle) ---------------------------------

_MASKED = -1e30


def encode_padded(model: EncoderModel, batch: PaddedBatch, max_block_elems: int = 1 << 24) -> np.ndarray:
    """Hidden states ``[n_docs, padded_len, d_model]`` computed over every slot.

    Padding keys are masked out; padding query rows are computed and wasted,
    as in a conventional padded encoder.
    """
    cfg = model.config
    P = {n: t.data for n, t in model.params.items()}
    B, L = batch.token_ids.shape
    if L > cfg.max_seq_len:
        raise ValueError(f"padded length {L} exceeds max_seq_len={cfg.max_seq_len}")
    H, hd, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    eps = cfg.norm_eps

    def ln(x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        return xc / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps) * g + b

    x = ln(P["embed.tok"][batch.token_ids], P["embed.norm.g"], P["embed.norm.b"])
    pos = np.arange(L)
    key_ok = batch.valid[:, None, None, :]  # [B, 1, 1, L]
    q_block = max(1, min(L, max_block_elems // max(1, B * H * L)))
    scale = x.dtype.type(1.0 / math.sqrt(hd))
    c = x.dtype.type(_GELU_C)
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        h = ln(x, P[pre + "attn_norm.g"], P[pre + "attn_norm.b"])
        qkv = (h.reshape(B * L, d) @ P[pre + "wqkv"] + P[pre + "bqkv"]).reshape(B, L, 3, H, hd)
        theta = cfg.rope_theta_global if cfg.is_global(l) else cfg.rope_theta_local
        ang = rope_angles(pos, hd, theta)  # [L, hd/2]
        q = _rotate(qkv[:, :, 0].transpose(0, 2, 1, 3), ang)  # [B, H, L, hd]
        k = _rotate(qkv[:, :, 1].transpose(0, 2, 1, 3), ang)
        v = qkv[:, :, 2].transpose(0, 2, 1, 3)
        hw = half_window(cfg, l)
        att = np.empty_like(q)
        for qs in range(0, L, q_block):
            qe = min(L, qs + q_block)
            S = np.matmul(q[:, :, qs:qe], k.transpose(0, 1, 3, 2)) * scale
            ok = key_ok & attention_mask(pos[qs:qe], pos, hw)[None, None]
            S = np.where(ok, S, x.dtype.type(_MASKED))
            S -= S.max(axis=-1, keepdims=True)
            np.exp(S, out=S)
            S /= S.sum(axis=-1, keepdims=True)
            att[:, :, qs:qe] = np.matmul(S, v)
        a = att.transpose(0, 2, 1, 3).reshape(B * L, d) @ P[pre + "wo"] + P[pre + "bo"]
        x = x + a.reshape(B, L, d)
        h = ln(x, P[pre + "mlp_norm.g"], P[pre + "mlp_norm.b"]).reshape(B * L, d)
        u = h @ P[pre + "w1"] + P[pre + "b1"]
        u = 0.5 * u * (1.0 + np.tanh(c * (u + 0.044715 * (u * u * u))))
        x = x + (u @ P[pre + "w2"] + P[pre + "b2"]).reshape(B, L, d)
    return ln(x, P["final_norm.g"], P["final_norm.b"])


def forward_mlm_padded(model: EncoderModel, batch: PaddedBatch) -> np.ndarray:
    """Logits ``[n_docs, padded_len, vocab]``; rows at padding slots are meaningless."""
    hid = encode_padded(model, batch)
    return hid @ model.params["mlm.weight"].data + model.params["mlm.bias"].data


# -- cost model -------------------------------------------------------------


def count_attention_flops(config: ModelConfig, seq_len: int) -> dict:
    """Analytic FLOPs for one sequence.

    Attention scores and the weighted value sum cost ``4 * n * keys * d``
    (two multiply-adds per element), with ``keys = n`` on global layers and
    ``min(window, n)`` on local layers. Dense projections and FFN are
    reported separately.
    """
    if seq_len > config.max_seq_len:
        raise ValueError(f"seq_len {seq_len} exceeds max_seq_len={config.max_seq_len}")
    n, d = seq_len, config.d_model
    per_layer = []
    for l in range(config.n_layers):
        keys = n if config.is_global(l) else min(config.window, n)
        per_layer.append({"layer": l, "global": config.is_global(l), "flops": 4 * n * keys * d})
    dense = 2 * n * (4 * d * d + 2 * d * config.d_ff)
    total = sum(r["flops"] for r in per_layer)
    return {
        "per_layer": per_layer,
        "total": total,
        "global_layers": sum(r["global"] for r in per_layer),
        "local_layers": sum(not r["global"] for r in per_layer),
        "dense_per_layer": dense,
        "total_with_dense": total + dense * config.n_layers,
    }
