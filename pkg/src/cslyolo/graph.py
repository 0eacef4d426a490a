"""Immutable computation graphs over the primitive ops.

A :class:`Network` is a topologically ordered tuple of :class:`GraphNode`
plus a parameter store. Networks are resolution-agnostic: resize targets
are expressed relative to other nodes, so one graph runs at any input size
whose stride bookkeeping works out.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Sequence

import numpy as np

from . import ops
from .tensor import GradTape, MacCounter, ShapeError, Tensor

MIDDLE_RULES = ("geometric", "arithmetic", "pow2")


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def middle_size(a: int, b: int, rule: str = "geometric") -> int:
    """Resolution of a level inserted between two pyramid levels of sizes a and b."""
    if rule == "geometric":
        return _round_half_up(math.sqrt(a * b))
    if rule == "arithmetic":
        return _round_half_up((a + b) / 2)
    if rule == "pow2":
        return _round_half_up(max(a, b) / math.sqrt(2))
    raise ValueError(f"middle rule must be one of {MIDDLE_RULES}, got {rule!r}")


@dataclass(frozen=True)
class GraphNode:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    params: tuple[str, ...] = ()
    attrs: tuple[tuple[str, Any], ...] = ()

    @property
    def attr(self) -> dict[str, Any]:
        return dict(self.attrs)


class Network:
    def __init__(self, nodes: Sequence[GraphNode], params: dict[str, Tensor],
                 inputs: Sequence[str], outputs: Sequence[str]):
        self.nodes = tuple(nodes)
        self.params = dict(params)
        self.inputs = tuple(inputs)
        self.outputs = tuple(outputs)
        self._by_name = {n.name: n for n in self.nodes}
        if len(self._by_name) != len(self.nodes):
            raise ValueError("duplicate node names")
        seen = set()
        for n in self.nodes:
            for ref in n.inputs + tuple(n.attr.get("size_of", ())):
                if ref not in seen:
                    raise ValueError(f"node {n.name!r} references {ref!r} before it is defined")
            for p in n.params:
                if p not in self.params:
                    raise ValueError(f"node {n.name!r} references missing parameter {p!r}")
            seen.add(n.name)
        for o in self.outputs:
            if o not in self._by_name:
                raise ValueError(f"unknown output {o!r}")

    def node(self, name: str) -> GraphNode:
        return self._by_name[name]

    @property
    def input_channels(self) -> tuple[int, ...]:
        return tuple(self._by_name[i].attr["channels"] for i in self.inputs)

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def with_params(self, updates: dict[str, Any]) -> "Network":
        params = dict(self.params)
        for k, v in updates.items():
            if k not in params:
                raise KeyError(f"unknown parameter {k!r}")
            t = v if isinstance(v, Tensor) else Tensor(v, dtype=params[k].dtype)
            if t.shape != params[k].shape:
                raise ShapeError(f"parameter {k!r} has shape {params[k].shape}, got {t.shape}")
            params[k] = t
        return Network(self.nodes, params, self.inputs, self.outputs)

    def astype(self, dtype) -> "Network":
        return Network(self.nodes, {k: v.astype(dtype) for k, v in self.params.items()}, self.inputs, self.outputs)

    # -- shapes ---------------------------------------------------------------

    def infer_shapes(self, *input_shapes) -> dict[str, tuple[int, int, int, int]]:
        if len(input_shapes) != len(self.inputs):
            raise ValueError(f"expected {len(self.inputs)} input shapes, got {len(input_shapes)}")
        shapes: dict[str, tuple[int, int, int, int]] = {}
        for name, s in zip(self.inputs, input_shapes):
            s = tuple(int(v) for v in s)
            if len(s) != 4 or min(s) < 1:
                raise ShapeError(f"input {name!r} shape {s} is not a valid rank-4 shape")
            want = self._by_name[name].attr["channels"]
            if s[1] != want:
                raise ShapeError(f"input {name!r} expects {want} channels, got shape {s}")
            shapes[name] = s
        for n in self.nodes:
            if n.op == "input":
                continue
            shapes[n.name] = _infer(n, [shapes[i] for i in n.inputs], shapes, self.params)
        return shapes

    # -- evaluation -----------------------------------------------------------

    def forward(self, *xs: Tensor, counter: MacCounter | None = None, tape: GradTape | None = None,
                return_all: bool = False):
        if len(xs) != len(self.inputs):
            raise ValueError(f"expected {len(self.inputs)} inputs, got {len(xs)}")
        dtype = xs[0].dtype
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        if tape is not None:
            tape.watch(*params.values(), *xs)
        self.infer_shapes(*(x.shape for x in xs))
        env: dict[str, Tensor] = dict(zip(self.inputs, xs))
        for n in self.nodes:
            if n.op == "input":
                continue
            env[n.name] = _run(n, [env[i] for i in n.inputs], env, params, counter, tape)
        outs = [env[o] for o in self.outputs]
        return (outs, env, params) if return_all else outs


def _spatial(shape):
    return shape[2], shape[3]


def _resize_target(n: GraphNode, shapes) -> tuple[int, int]:
    refs = n.attr["size_of"]
    if len(refs) == 1:
        return _spatial(shapes[refs[0]])
    (ha, wa), (hb, wb) = _spatial(shapes[refs[0]]), _spatial(shapes[refs[1]])
    rule = n.attr.get("rule", "geometric")
    return middle_size(ha, hb, rule), middle_size(wa, wb, rule)


def _infer(n: GraphNode, ins, shapes, params) -> tuple[int, int, int, int]:
    a = n.attr
    op = n.op
    if op in ("conv", "pointwise", "depthwise"):
        b, c, h, w = ins[0]
        wshape = params[n.params[0]].shape
        if wshape[2] != c:
            raise ShapeError(f"{n.name}: weights shape {wshape} expects {wshape[2]} channels, input shape {ins[0]}")
        k, stride, pad = a["kernel"], a.get("stride", 1), a.get("padding", "same")
        ho = ops.conv_output_size(h, k, stride, pad)
        wo = ops.conv_output_size(w, k, stride, pad)
        out_c = c * a["multiplier"] if op == "depthwise" else a["out_ch"]
        return (b, out_c, ho, wo)
    if op in ("affine", "mish", "sigmoid"):
        return ins[0]
    if op in ("maxpool", "avgpool"):
        b, c, h, w = ins[0]
        win, s = a["window"], a["stride"]
        if win > h or win > w:
            raise ShapeError(f"{n.name}: pool window {win} exceeds input shape {ins[0]}")
        return (b, c, (h - win) // s + 1, (w - win) // s + 1)
    if op == "adaptive_pool":
        b, c, h, w = ins[0]
        oh, ow = (h // 2, w // 2) if a.get("halve") else (a["out_h"], a["out_w"])
        if oh < 1 or ow < 1:
            raise ShapeError(f"{n.name}: adaptive pool of input shape {ins[0]} gives empty output")
        return (b, c, oh, ow)
    if op == "global_pool":
        b, c, _, _ = ins[0]
        return (b, c, 1, 1)
    if op == "resize":
        b, c, _, _ = ins[0]
        return (b, c) + _resize_target(n, shapes)
    if op == "concat":
        ref = ins[0]
        for s in ins[1:]:
            if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
                raise ShapeError(f"{n.name}: concat shape mismatch {ref} vs {s}")
        return (ref[0], sum(s[1] for s in ins), ref[2], ref[3])
    if op == "add":
        for s in ins[1:]:
            if s != ins[0]:
                raise ShapeError(f"{n.name}: add shape mismatch {ins[0]} vs {s}")
        return ins[0]
    if op == "scale":
        return ins[0]
    raise ValueError(f"unknown op {op!r} at node {n.name!r}")


def _run(n: GraphNode, args, env, params, counter, tape) -> Tensor:
    a = n.attr
    kw = dict(counter=counter, tape=tape, name=n.name)
    p = [params[k] for k in n.params]
    op = n.op
    if op == "conv":
        return ops.conv2d(args[0], p[0], a.get("stride", 1), a.get("padding", "same"), p[1] if len(p) > 1 else None, **kw)
    if op == "pointwise":
        return ops.pointwise_conv2d(args[0], p[0], p[1] if len(p) > 1 else None, **kw)
    if op == "depthwise":
        return ops.depthwise_conv2d(args[0], p[0], a.get("stride", 1), a.get("padding", "same"), **kw)
    if op == "affine":
        return ops.affine(args[0], p[0], p[1], **kw)
    if op == "mish":
        return ops.mish(args[0], **kw)
    if op == "sigmoid":
        return ops.sigmoid(args[0], **kw)
    if op in ("maxpool", "avgpool"):
        return ops.pool2d(args[0], op[:3], a["window"], a["stride"], **kw)
    if op == "adaptive_pool":
        h, w = args[0].shape[2:]
        oh, ow = (h // 2, w // 2) if a.get("halve") else (a["out_h"], a["out_w"])
        return ops.adaptive_avg_pool(args[0], oh, ow, **kw)
    if op == "global_pool":
        return ops.global_avg_pool(args[0], **kw)
    if op == "resize":
        shapes = {r: env[r].shape for r in a["size_of"]}
        return ops.resize_nearest(args[0], *_resize_target(n, shapes), **kw)
    if op == "concat":
        return ops.concat_channels(args, **kw)
    if op == "add":
        return ops.add(args, **kw)
    if op == "scale":
        return ops.scale_channels(args[0], args[1], **kw)
    raise ValueError(f"unknown op {op!r} at node {n.name!r}")


class GraphBuilder:
    """Accumulates nodes and deterministically initialized parameters.

    Weights are drawn uniform in +-sqrt(1/fan_in) from a generator seeded
    once, in node creation order; identical build calls therefore give
    identical networks.
    """

    def __init__(self, seed: int = 0):
        self._nodes: list[GraphNode] = []
        self._names: set[str] = set()
        self._inputs: list[str] = []
        self.params: dict[str, Tensor] = {}
        self.channels: dict[str, int] = {}
        self._rng = np.random.default_rng(seed)

    def _add(self, name: str, op: str, inputs: Iterable[str], n_channels: int,
             params: Iterable[str] = (), **attrs) -> str:
        if name in self._names:
            raise ValueError(f"duplicate node name {name!r}")
        inputs = tuple(inputs)
        for i in inputs:
            if i not in self._names:
                raise ValueError(f"node {name!r} uses undefined input {i!r}")
        self._names.add(name)
        self._nodes.append(GraphNode(name, op, inputs, tuple(params), tuple(sorted(attrs.items()))))
        self.channels[name] = n_channels
        return name

    def _uniform(self, name: str, shape, fan_in: int) -> str:
        bound = math.sqrt(1.0 / fan_in)
        self.params[name] = Tensor(self._rng.uniform(-bound, bound, size=shape).astype(np.float32))
        return name

    def _const(self, name: str, shape, value: float) -> str:
        self.params[name] = Tensor(np.full(shape, value, dtype=np.float32))
        return name

    def input(self, name: str, channels: int) -> str:
        self._inputs.append(name)
        return self._add(name, "input", (), channels, channels=channels)

    def conv(self, x: str, out_ch: int, kernel: int = 3, stride: int = 1, *, name: str,
             bias: bool = False, padding: str = "same") -> str:
        c = self.channels[x]
        ps = [self._uniform(f"{name}.w", (kernel, kernel, c, out_ch), kernel * kernel * c)]
        if bias:
            ps.append(self._const(f"{name}.b", (1, out_ch, 1, 1), 0.0))
        return self._add(name, "conv", (x,), out_ch, ps, kernel=kernel, out_ch=out_ch, stride=stride,
                         padding=padding, bias=bias)

    def pointwise(self, x: str, out_ch: int, *, name: str, bias: bool = False, shared: str | None = None) -> str:
        """1x1 conv; ``shared`` names a parameter prefix reused across nodes."""
        c = self.channels[x]
        prefix = shared or name
        wname = f"{prefix}.w"
        if wname in self.params:
            if self.params[wname].shape != (1, 1, c, out_ch):
                raise ShapeError(f"shared weights {wname!r} have shape {self.params[wname].shape}, "
                                 f"need {(1, 1, c, out_ch)}")
        else:
            self._uniform(wname, (1, 1, c, out_ch), c)
            if bias:
                self._const(f"{prefix}.b", (1, out_ch, 1, 1), 0.0)
        ps = [wname] + ([f"{prefix}.b"] if bias else [])
        return self._add(name, "pointwise", (x,), out_ch, ps, kernel=1, out_ch=out_ch, bias=bias)

    def depthwise(self, x: str, kernel: int = 3, multiplier: int = 1, stride: int = 1, *, name: str) -> str:
        c = self.channels[x]
        w = self._uniform(f"{name}.w", (kernel, kernel, c, multiplier), kernel * kernel)
        return self._add(name, "depthwise", (x,), c * multiplier, [w], kernel=kernel, multiplier=multiplier,
                         stride=stride, padding="same")

    def affine(self, x: str, *, name: str) -> str:
        c = self.channels[x]
        ps = [self._const(f"{name}.scale", (1, c, 1, 1), 1.0), self._const(f"{name}.shift", (1, c, 1, 1), 0.0)]
        return self._add(name, "affine", (x,), c, ps)

    def mish(self, x: str, *, name: str) -> str:
        return self._add(name, "mish", (x,), self.channels[x])

    def sigmoid(self, x: str, *, name: str) -> str:
        return self._add(name, "sigmoid", (x,), self.channels[x])

    def pool(self, x: str, kind: str = "max", window: int = 2, stride: int = 2, *, name: str) -> str:
        return self._add(name, f"{kind}pool", (x,), self.channels[x], window=window, stride=stride)

    def adaptive_halve(self, x: str, *, name: str) -> str:
        return self._add(name, "adaptive_pool", (x,), self.channels[x], halve=True)

    def global_pool(self, x: str, *, name: str) -> str:
        return self._add(name, "global_pool", (x,), self.channels[x])

    def resize(self, x: str, size_of: Sequence[str], rule: str = "geometric", *, name: str) -> str:
        if len(size_of) not in (1, 2):
            raise ValueError("resize needs one reference node, or two for a middle size")
        if rule not in MIDDLE_RULES:
            raise ValueError(f"middle rule must be one of {MIDDLE_RULES}, got {rule!r}")
        for r in size_of:
            if r not in self._names:
                raise ValueError(f"resize reference {r!r} is undefined")
        return self._add(name, "resize", (x,), self.channels[x], size_of=tuple(size_of), rule=rule)

    def concat(self, xs: Sequence[str], *, name: str) -> str:
        return self._add(name, "concat", xs, sum(self.channels[x] for x in xs))

    def add(self, xs: Sequence[str], *, name: str) -> str:
        chans = {self.channels[x] for x in xs}
        if len(chans) != 1:
            raise ShapeError(f"{name}: add of tensors with channel counts {sorted(chans)}")
        if len(xs) == 1:
            return xs[0]
        return self._add(name, "add", xs, chans.pop())

    def scale(self, x: str, s: str, *, name: str) -> str:
        return self._add(name, "scale", (x, s), self.channels[x])

    def build(self, outputs: Sequence[str]) -> Network:
        return Network(self._nodes, self.params, self._inputs, outputs)
