"""Tensor and tape: the reverse-mode bookkeeping behind every model op."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_ACTIVE_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    pass


class Tensor:
    """Dense float array with an optional gradient buffer.

    Data is row-major float32 unless built from a float64 array (used for
    finite-difference checks). ``grad`` is filled in by :func:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops executed inside the block whose inputs
    require grad are appended in execution order.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE_TAPES.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def _append(self, rec: _Record) -> None:
        self.records.append(rec)
        self._outputs.add(id(rec.out))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._outputs


def active_tape() -> Tape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def record(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as a Tensor, logging it on the active tape if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per
    input, in order.
    """
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape._append(_Record(out, tuple(inputs), backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Propagate d(loss)/d(.) through ``tape`` in exact reverse order.

    Gradients are accumulated into ``.grad`` of every tensor that requires
    grad and is reachable from ``loss``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ValueError("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.out), None)
        if g_out is None:
            continue
        rec.out.grad = g_out
        in_grads = rec.backward_fn(g_out)
        for t, g in zip(rec.inputs, in_grads):
            if g is None or not t.requires_grad:
                continue
            if g.shape != t.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match input shape {t.shape}")
            prev = grads.get(id(t))
            grads[id(t)] = g if prev is None else prev + g
    # leftovers are leaves (parameters, inputs)
    leaves = {id(t): t for rec in tape.records for t in rec.inputs if t.requires_grad}
    for key, g in grads.items():
        t = leaves.get(key)
        if t is None:
            continue
        t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
