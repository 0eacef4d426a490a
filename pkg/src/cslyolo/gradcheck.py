"""Central finite-difference checks of the reverse-mode rules.

The scalar loss is a fixed random weighting of every output element,
L = sum(r * out), evaluated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import ops
from .csl import CslModuleSpec, csl_module_network
from .graph import Network
from .tensor import GradTape, Tensor

EPS = 1e-5
PRIMITIVE_TOL = 1e-4
DETECTOR_TOL = 1e-3
# evaluation-point gain for composed graphs, see check_network
NETWORK_WEIGHT_GAIN = 2.0


@dataclass
class GradCheckResult:
    name: str
    shapes: list[tuple[int, ...]]
    max_rel_err: float
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        shapes = " ".join("x".join(map(str, s)) for s in self.shapes)
        return f"{status} {self.name:<34} max rel err {self.max_rel_err:.2e} (tol {self.tol:g}, {self.checked} coords)  [{shapes}]"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Largest elementwise |a - n| / max(|a|, |n|), with a tiny floor so 0 vs 0 counts as exact."""
    a, n = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def _as_list(out):
    return list(out) if isinstance(out, (list, tuple)) else [out]


def _loss(outs, seeds) -> float:
    return float(sum(np.sum(o.data * s) for o, s in zip(outs, seeds)))


def _coords(shape, limit, rng):
    total = int(np.prod(shape))
    flat = np.arange(total) if limit is None or total <= limit else np.sort(rng.choice(total, limit, replace=False))
    return [np.unravel_index(i, shape) for i in flat]


def check_function(name: str, fn: Callable, inputs: Sequence[np.ndarray], *, eps: float = EPS,
                   tol: float = PRIMITIVE_TOL, seed: int = 0, max_coords: int | None = None) -> GradCheckResult:
    """Compare tape gradients of ``fn(*tensors, tape=...)`` against central differences."""
    rng = np.random.default_rng(seed)
    xs = [Tensor(np.asarray(x, dtype=np.float64)) for x in inputs]
    tape = GradTape()
    tape.watch(*xs)
    outs = _as_list(fn(*xs, tape=tape))
    seeds = [rng.standard_normal(o.shape) for o in outs]
    grads = tape.backward(outs, seeds)
    worst, count = 0.0, 0
    for i, x in enumerate(xs):
        coords = _coords(x.shape, max_coords, rng)
        analytic = np.array([grads[x][c] for c in coords])
        numeric = []
        for c in coords:
            vals = []
            for sign in (1, -1):
                arr = x.data.copy()
                arr[c] += sign * eps
                args = list(xs)
                args[i] = Tensor(arr)
                vals.append(_loss(_as_list(fn(*args)), seeds))
            numeric.append((vals[0] - vals[1]) / (2 * eps))
        worst = max(worst, rel_error(analytic, np.array(numeric)))
        count += len(coords)
    return GradCheckResult(name, [x.shape for x in xs], worst, count, tol)


def rescale_weights(net: Network, gain: float) -> Network:
    """Multiply every convolution weight (``*.w``) by ``gain``; biases and affine terms are left alone."""
    if gain == 1.0:
        return net
    return net.with_params({k: Tensor(v.data * gain) for k, v in net.params.items() if k.endswith(".w")})


def check_network(name: str, net: Network, x: np.ndarray, *, eps: float = EPS, tol: float = PRIMITIVE_TOL,
                  seed: int = 0, max_coords_per_tensor: int | None = None, weight_gain: float = 1.0) -> GradCheckResult:
    """Check gradients w.r.t. the input and every parameter of ``net`` at float64.

    ``weight_gain`` moves the evaluation point to rescaled weights. The
    ±sqrt(1/fan_in) init shrinks activations layer by layer, and in a deep
    graph the far-from-output gradients sink to the 1e-10 range where central
    differences are mostly rounding noise; a gain of 2 keeps them measurable.
    """
    rng = np.random.default_rng(seed)
    net = rescale_weights(net.astype(np.float64), weight_gain)
    xt = Tensor(np.asarray(x, dtype=np.float64))
    tape = GradTape()
    outs = net.forward(xt, tape=tape)
    seeds = [rng.standard_normal(o.shape) for o in outs]
    grads = tape.backward(outs, seeds)

    targets = [("<input>", xt)] + sorted(net.params.items())
    worst, count = 0.0, 0
    for key, t in targets:
        coords = _coords(t.shape, max_coords_per_tensor, rng)
        analytic = np.array([grads[t][c] for c in coords])
        numeric = []
        for c in coords:
            vals = []
            for sign in (1, -1):
                arr = t.data.copy()
                arr[c] += sign * eps
                if key == "<input>":
                    outs_p = net.forward(Tensor(arr))
                else:
                    outs_p = net.with_params({key: Tensor(arr)}).forward(xt)
                vals.append(_loss(outs_p, seeds))
            numeric.append((vals[0] - vals[1]) / (2 * eps))
        worst = max(worst, rel_error(analytic, np.array(numeric)))
        count += len(coords)
    return GradCheckResult(name, [xt.shape], worst, count, tol)


# -- suites -------------------------------------------------------------------

def _primitive_cases(rng):
    r = lambda *s: rng.standard_normal(s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.5, 1.5, size=s)  # noqa: E731
    return [
        ("conv2d 3x3 same s1", lambda x, w, tape=None: ops.conv2d(x, w, 1, "same", tape=tape), [r(1, 3, 6, 6), r(3, 3, 3, 4)]),
        ("conv2d 3x3 same s2", lambda x, w, tape=None: ops.conv2d(x, w, 2, "same", tape=tape), [r(1, 3, 7, 7), r(3, 3, 3, 2)]),
        ("conv2d 5x5 valid s1", lambda x, w, tape=None: ops.conv2d(x, w, 1, "valid", tape=tape), [r(1, 2, 7, 6), r(5, 5, 2, 3)]),
        ("conv2d 3x3 +bias", lambda x, w, b, tape=None: ops.conv2d(x, w, 1, "same", b, tape=tape),
         [r(2, 2, 5, 5), r(3, 3, 2, 3), r(1, 3, 1, 1)]),
        ("pointwise", lambda x, w, tape=None: ops.pointwise_conv2d(x, w, tape=tape), [r(1, 4, 6, 6), r(1, 1, 4, 5)]),
        ("depthwise 3x3 m1", lambda x, w, tape=None: ops.depthwise_conv2d(x, w, 1, "same", tape=tape), [r(1, 4, 6, 6), r(3, 3, 4, 1)]),
        ("depthwise 3x3 m2 s2", lambda x, w, tape=None: ops.depthwise_conv2d(x, w, 2, "same", tape=tape), [r(1, 3, 7, 6), r(3, 3, 3, 2)]),
        ("depthwise 5x5 m3", lambda x, w, tape=None: ops.depthwise_conv2d(x, w, 1, "same", tape=tape), [r(1, 2, 6, 6), r(5, 5, 2, 3)]),
        ("mish", lambda x, tape=None: ops.mish(x, tape=tape), [3 * r(1, 4, 6, 6)]),
        ("sigmoid", lambda x, tape=None: ops.sigmoid(x, tape=tape), [3 * r(1, 4, 6, 6)]),
        ("affine", lambda x, s, b, tape=None: ops.affine(x, s, b, tape=tape), [r(2, 4, 5, 5), r(1, 4, 1, 1), r(1, 4, 1, 1)]),
        ("max pool 2x2", lambda x, tape=None: ops.pool2d(x, "max", 2, 2, tape=tape), [r(1, 3, 6, 6)]),
        ("max pool 3x3 s1", lambda x, tape=None: ops.pool2d(x, "max", 3, 1, tape=tape), [r(1, 2, 6, 6)]),
        ("avg pool 2x2", lambda x, tape=None: ops.pool2d(x, "avg", 2, 2, tape=tape), [r(1, 3, 7, 6)]),
        ("adaptive avg pool 7x6->3x4", lambda x, tape=None: ops.adaptive_avg_pool(x, 3, 4, tape=tape), [r(1, 3, 7, 6)]),
        ("global avg pool", lambda x, tape=None: ops.global_avg_pool(x, tape=tape), [r(2, 4, 5, 6)]),
        ("resize nearest 4x4->7x9", lambda x, tape=None: ops.resize_nearest(x, 7, 9, tape=tape), [r(1, 2, 4, 4)]),
        ("resize nearest 8x8->5x3", lambda x, tape=None: ops.resize_nearest(x, 5, 3, tape=tape), [r(1, 2, 8, 8)]),
        ("concat", lambda a, b, tape=None: ops.concat_channels([a, b], tape=tape), [r(1, 2, 4, 4), r(1, 3, 4, 4)]),
        ("split", lambda x, tape=None: ops.split_channels(x, [2, 3], tape=tape), [r(1, 5, 4, 4)]),
        ("add", lambda a, b, c, tape=None: ops.add([a, b, c], tape=tape), [r(1, 3, 4, 4), r(1, 3, 4, 4), r(1, 3, 4, 4)]),
        ("scale_channels", lambda x, s, tape=None: ops.scale_channels(x, s, tape=tape), [r(2, 3, 4, 4), pos(2, 3, 1, 1)]),
    ]


def primitive_suite(seed: int = 0) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    return [check_function(name, fn, inputs, seed=seed) for name, fn, inputs in _primitive_cases(rng)]


CSL_SUITE_SPECS = [
    CslModuleSpec(8, 8, 2, variant="plain"),
    CslModuleSpec(8, 8, 3, variant="plain"),
    CslModuleSpec(8, 8, 2, variant="attention", se_reduction=4),
    CslModuleSpec(8, 8, 3, variant="attention", se_reduction=4),
    CslModuleSpec(8, 8, 2, variant="downsample"),
    CslModuleSpec(8, 8, 3, variant="downsample"),
    CslModuleSpec(4, 4, 2, variant="plain"),
]


def csl_suite(seed: int = 0, size: int = 8, weight_gain: float = NETWORK_WEIGHT_GAIN) -> list[GradCheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for spec in CSL_SUITE_SPECS:
        net = csl_module_network(spec, seed=seed)
        x = rng.standard_normal((1, spec.in_ch, size, size))
        name = f"csl C={spec.in_ch} N={spec.out_ch} t={spec.expansion} {spec.variant}"
        out.append(check_network(name, net, x, seed=seed, weight_gain=weight_gain))
    return out


def detector_check(net: Network, input_size: int, seed: int = 0, max_coords_per_tensor: int = 2,
                   weight_gain: float = NETWORK_WEIGHT_GAIN) -> GradCheckResult:
    """End-to-end check on a sampled subset of coordinates of every parameter tensor."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, net.input_channels[0], input_size, input_size))
    return check_network(f"toy detector {input_size}x{input_size}", net, x, tol=DETECTOR_TOL, seed=seed,
                         max_coords_per_tensor=max_coords_per_tensor, weight_gain=weight_gain)
