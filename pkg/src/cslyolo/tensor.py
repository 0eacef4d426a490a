"""Tensor value type, MAC counter and gradient tape.

Tensors are immutable rank-4 arrays in (batch, channels, height, width)
layout. Parameters use the same container: convolution weights are stored
as (K, K, C, N), per-channel vectors as (1, C, 1, 1).
"""
from __future__ import annotations

from collections import defaultdict
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


class Tensor:
    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4, got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ShapeError(f"all tensor dimensions must be >= 1, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Internal fast path; caller guarantees a fresh rank-4 float array.
        t = cls.__new__(cls)
        if arr.ndim != 4 or min(arr.shape) < 1:
            raise ShapeError(f"tensor must be rank 4 with dims >= 1, got {arr.shape}")
        arr.setflags(write=False)
        t.data = arr
        return t

    @classmethod
    def zeros(cls, shape, dtype=np.float32) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def astype(self, dtype) -> "Tensor":
        if self.data.dtype == dtype:
            return self
        return Tensor._wrap(self.data.astype(dtype))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype})"


class MacCounter:
    """Accumulates multiply-accumulate counts per layer name."""

    def __init__(self):
        self.per_layer: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return sum(self.per_layer.values())

    def add(self, name: str, macs: int) -> None:
        if macs < 0:
            raise ValueError("MAC increments must be non-negative")
        self.per_layer[name] += int(macs)

    def __repr__(self):
        return f"MacCounter(total={self.total}, layers={len(self.per_layer)})"


class TapeError(RuntimeError):
    pass


class Gradients:
    """Gradient lookup keyed by tensor identity."""

    def __init__(self, grads: dict[int, np.ndarray], known: dict[int, Tensor]):
        self._grads = grads
        self._known = known

    def __getitem__(self, t: Tensor) -> np.ndarray:
        key = id(t)
        if key not in self._known:
            raise KeyError("tensor was not recorded on this tape")
        g = self._grads.get(key)
        return np.zeros_like(t.data) if g is None else g

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._known


BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class GradTape:
    """Records primitive applications so they can be replayed in reverse.

    Records are appended as the forward pass runs, so their order is a
    topological order of the computation.
    """

    def __init__(self):
        self._records: list[tuple[str, tuple[Tensor, ...], Tensor, BackwardFn]] = []
        self._known: dict[int, Tensor] = {}
        self._consumed = False

    def __len__(self):
        return len(self._records)

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            self._known[id(t)] = t

    def record(self, op: str, inputs: Iterable[Tensor], output: Tensor, backward: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("cannot record on a tape that has already been replayed")
        inputs = tuple(inputs)
        self.watch(*inputs, output)
        self._records.append((op, inputs, output, backward))

    def backward(self, outputs, seeds=None) -> Gradients:
        """Replay the tape backward from one or more outputs.

        ``seeds`` are the upstream gradients dL/d(output); they default to
        ones, i.e. the loss is the plain sum of the outputs.
        """
        if self._consumed:
            raise TapeError("tape already consumed")
        self._consumed = True
        if isinstance(outputs, Tensor):
            outputs = [outputs]
            seeds = None if seeds is None else [seeds]
        outputs = list(outputs)
        if seeds is None:
            seeds = [np.ones_like(o.data) for o in outputs]
        grads: dict[int, np.ndarray] = {}
        for out, seed in zip(outputs, seeds, strict=True):
            seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=out.dtype)
            if seed.shape != out.shape:
                raise ShapeError(f"seed shape {seed.shape} does not match output {out.shape}")
            if id(out) not in self._known:
                raise TapeError("output was not produced on this tape")
            _accumulate(grads, out, seed)

        self.visited: list[str] = []
        for op, inputs, output, fn in reversed(self._records):
            g_out = grads.get(id(output))
            if g_out is None:
                continue
            self.visited.append(op)
            for t, g in zip(inputs, fn(g_out), strict=True):
                if g is not None:
                    _accumulate(grads, t, g)
        return Gradients(grads, self._known)


def _accumulate(grads: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor {t.shape}")
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g
