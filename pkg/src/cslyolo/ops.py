"""Primitive layer forward passes with MAC counting and reverse-mode rules.

Every op takes optional ``counter`` and ``tape`` keyword arguments. The
counter is incremented by the multiply-accumulates the op actually
executes (derived from the array extents it touches, not from a formula);
the tape records a closure that maps the output gradient to input
gradients.

Convolutions use cross-correlation orientation. Accumulation runs over
kernel offsets in fixed row-major order, one channel contraction per
offset.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import GradTape, MacCounter, ShapeError, Tensor

PADDINGS = ("same", "valid")


def _emit(op, name, inputs, out_arr, backward, counter, tape, macs=0):
    out = Tensor._wrap(out_arr)
    if counter is not None:
        counter.add(name or op, macs)
    if tape is not None:
        tape.record(op, inputs, out, backward)
    return out


def _check_same_dtype(*ts: Tensor):
    dtypes = {t.dtype for t in ts}
    if len(dtypes) > 1:
        raise TypeError(f"mixed dtypes {sorted(str(d) for d in dtypes)}")


def conv_output_size(size: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-size // stride)
    if padding == "valid":
        if size < kernel:
            raise ShapeError(f"valid convolution needs input {size} >= kernel {kernel}")
        return (size - kernel) // stride + 1
    raise ValueError(f"padding must be one of {PADDINGS}, got {padding!r}")


def _pads(size: int, out: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "valid":
        return 0, 0
    total = max((out - 1) * stride + kernel - size, 0)
    # extra pixel goes to bottom/right
    return total // 2, total - total // 2


def _check_kernel(w: Tensor, x: Tensor, *, depthwise: bool, stride: int):
    k1, k2, c, _ = w.shape
    if k1 != k2:
        raise ShapeError(f"kernel must be square, weights shape {w.shape}")
    if k1 % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k1} (weights shape {w.shape})")
    if c != x.shape[1]:
        kind = "depthwise" if depthwise else "conv"
        raise ShapeError(
            f"{kind} weights shape {w.shape} expects {c} input channels, "
            f"input shape {x.shape} has {x.shape[1]}"
        )
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def _geometry(x: Tensor, k: int, stride: int, padding: str):
    _, _, h, w = x.shape
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)
    ph = _pads(h, ho, k, stride, padding)
    pw = _pads(w, wo, k, stride, padding)
    return ho, wo, ph, pw


def _window(arr, ky, kx, ho, wo, stride):
    # arr is channels-last (B, Hp, Wp, C)
    return arr[:, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride, :]


def conv2d(x: Tensor, weights: Tensor, stride: int = 1, padding: str = "same", bias: Tensor | None = None,
           *, counter: MacCounter | None = None, tape: GradTape | None = None, name: str | None = None) -> Tensor:
    """Dense 2-D convolution, weights laid out (K, K, C, N)."""
    _check_kernel(weights, x, depthwise=False, stride=stride)
    _check_same_dtype(x, weights, *([bias] if bias is not None else []))
    k, n = weights.shape[0], weights.shape[3]
    if bias is not None and bias.shape != (1, n, 1, 1):
        raise ShapeError(f"bias shape {bias.shape} does not match {n} output channels")
    ho, wo, (pt, pb), (pl, pr) = _geometry(x, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))).transpose(0, 2, 3, 1)
    w = weights.data
    acc = np.zeros((x.shape[0], ho, wo, n), dtype=x.dtype)
    macs = 0
    for ky in range(k):
        for kx in range(k):
            patch = _window(xp, ky, kx, ho, wo, stride)
            acc += patch @ w[ky, kx]
            macs += patch.size * n
    out = acc.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out)

    def backward(g):
        g_t = g.transpose(0, 2, 3, 1)
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for ky in range(k):
            for kx in range(k):
                patch = _window(xp, ky, kx, ho, wo, stride)
                dw[ky, kx] = np.tensordot(patch, g_t, axes=([0, 1, 2], [0, 1, 2]))
                _window(dxp, ky, kx, ho, wo, stride)[...] += g_t @ w[ky, kx].T
        hp, wp = dxp.shape[1], dxp.shape[2]
        dx = dxp[:, pt:hp - pb, pl:wp - pr, :].transpose(0, 3, 1, 2)
        grads = [np.ascontiguousarray(dx), dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)).reshape(1, n, 1, 1))
        return grads

    inputs = (x, weights) if bias is None else (x, weights, bias)
    return _emit("conv2d", name, inputs, out, backward, counter, tape, macs)


def pointwise_conv2d(x: Tensor, weights: Tensor, bias: Tensor | None = None, *,
                     counter=None, tape=None, name=None) -> Tensor:
    if weights.shape[:2] != (1, 1):
        raise ShapeError(f"pointwise weights must be 1x1xCxN, got {weights.shape}")
    return conv2d(x, weights, 1, "same", bias, counter=counter, tape=tape, name=name or "pointwise")


def depthwise_conv2d(x: Tensor, weights: Tensor, stride: int = 1, padding: str = "same",
                     *, counter=None, tape=None, name=None) -> Tensor:
    """Per-channel convolution, weights (K, K, C, multiplier).

    Output channel ``c * multiplier + j`` depends only on input channel c.
    """
    _check_kernel(weights, x, depthwise=True, stride=stride)
    _check_same_dtype(x, weights)
    k, c, m = weights.shape[0], weights.shape[2], weights.shape[3]
    ho, wo, (pt, pb), (pl, pr) = _geometry(x, k, stride, padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr))).transpose(0, 2, 3, 1)
    w = weights.data
    b = x.shape[0]
    acc = np.zeros((b, ho, wo, c, m), dtype=x.dtype)
    macs = 0
    for ky in range(k):
        for kx in range(k):
            patch = _window(xp, ky, kx, ho, wo, stride)
            acc += patch[..., None] * w[ky, kx]
            macs += patch.size * m
    out = np.ascontiguousarray(acc.reshape(b, ho, wo, c * m).transpose(0, 3, 1, 2))

    def backward(g):
        g_t = g.transpose(0, 2, 3, 1).reshape(b, ho, wo, c, m)
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        for ky in range(k):
            for kx in range(k):
                patch = _window(xp, ky, kx, ho, wo, stride)
                dw[ky, kx] = np.einsum("bhwc,bhwcm->cm", patch, g_t)
                _window(dxp, ky, kx, ho, wo, stride)[...] += (g_t * w[ky, kx]).sum(axis=-1)
        hp, wp = dxp.shape[1], dxp.shape[2]
        dx = dxp[:, pt:hp - pb, pl:wp - pr, :].transpose(0, 3, 1, 2)
        return np.ascontiguousarray(dx), dw

    return _emit("depthwise_conv2d", name, (x, weights), out, backward, counter, tape, macs)


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def _sigmoid(x):
    return (0.5 * (1.0 + np.tanh(0.5 * x))).astype(x.dtype, copy=False)


def mish(x: Tensor, *, counter=None, tape=None, name=None) -> Tensor:
    """x * tanh(softplus(x)); softplus via logaddexp so large |x| cannot overflow."""
    xd = x.data
    tsp = np.tanh(_softplus(xd))
    out = xd * tsp

    def backward(g):
        return (g * (tsp + xd * (1.0 - tsp * tsp) * _sigmoid(xd)),)

    return _emit("mish", name, (x,), out, backward, counter, tape)


def sigmoid(x: Tensor, *, counter=None, tape=None, name=None) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _emit("sigmoid", name, (x,), out, backward, counter, tape)


def affine(x: Tensor, scale: Tensor, shift: Tensor, *, counter=None, tape=None, name=None) -> Tensor:
    """Per-channel scale and shift (inference-time batch normalization)."""
    c = x.shape[1]
    for p in (scale, shift):
        if p.shape != (1, c, 1, 1):
            raise ShapeError(f"affine parameter shape {p.shape} does not match input shape {x.shape}")
    _check_same_dtype(x, scale, shift)
    out = x.data * scale.data + shift.data

    def backward(g):
        return (g * scale.data,
                (g * x.data).sum(axis=(0, 2, 3), keepdims=True),
                g.sum(axis=(0, 2, 3), keepdims=True))

    return _emit("affine", name, (x, scale, shift), out, backward, counter, tape)


def _pool_windows(arr, window, stride, ho, wo):
    return [arr[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
            for ky in range(window) for kx in range(window)]


def pool2d(x: Tensor, kind: str = "max", window: int = 2, stride: int = 2,
           *, counter=None, tape=None, name=None) -> Tensor:
    """Valid (unpadded) max or average pooling."""
    if kind not in ("max", "avg"):
        raise ValueError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be >= 1")
    b, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"pool window {window} exceeds spatial dims of input shape {x.shape}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    stack = np.stack(_pool_windows(x.data, window, stride, ho, wo), axis=-1)
    if kind == "max":
        arg = stack.argmax(axis=-1)
        out = np.take_along_axis(stack, arg[..., None], axis=-1)[..., 0]
    else:
        out = stack.mean(axis=-1)

    def backward(g):
        dx = np.zeros_like(x.data)
        views = _pool_windows(dx, window, stride, ho, wo)
        for i, view in enumerate(views):
            if kind == "max":
                view += np.where(arg == i, g, 0.0)
            else:
                view += g / (window * window)
        return (dx,)

    return _emit(f"{kind}_pool", name, (x,), np.ascontiguousarray(out), backward, counter, tape)


def _adaptive_matrix(size: int, out: int, dtype) -> np.ndarray:
    m = np.zeros((out, size), dtype=dtype)
    for i in range(out):
        start = (i * size) // out
        end = -(-((i + 1) * size) // out)
        m[i, start:end] = 1.0 / (end - start)
    return m


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int, *, counter=None, tape=None, name=None) -> Tensor:
    """Average over near-equal contiguous bins: bin i spans [floor(i*H/o), ceil((i+1)*H/o))."""
    _, _, h, w = x.shape
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"adaptive pool output dims must be >= 1, got ({out_h}, {out_w})")
    if out_h > h or out_w > w:
        raise ShapeError(f"adaptive pool output ({out_h}, {out_w}) exceeds input shape {x.shape}")
    ph = _adaptive_matrix(h, out_h, x.dtype)
    pw = _adaptive_matrix(w, out_w, x.dtype)
    out = ph @ x.data @ pw.T

    def backward(g):
        return (ph.T @ g @ pw,)

    return _emit("adaptive_avg_pool", name, (x,), np.ascontiguousarray(out), backward, counter, tape)


def global_avg_pool(x: Tensor, *, counter=None, tape=None, name=None) -> Tensor:
    _, _, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _emit("global_avg_pool", name, (x,), out, backward, counter, tape)


def resize_nearest(x: Tensor, out_h: int, out_w: int, *, counter=None, tape=None, name=None) -> Tensor:
    """Nearest-neighbour resize with src = floor(dst * in / out)."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"resize output dims must be >= 1, got ({out_h}, {out_w})")
    _, _, h, w = x.shape
    rows = (np.arange(out_h) * h) // out_h
    cols = (np.arange(out_w) * w) // out_w
    out = x.data[:, :, rows][:, :, :, cols]

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), rows[:, None], cols[None, :]), g)
        return (dx,)

    return _emit("resize_nearest", name, (x,), np.ascontiguousarray(out), backward, counter, tape)


def concat_channels(xs: Sequence[Tensor], *, counter=None, tape=None, name=None) -> Tensor:
    if not xs:
        raise ShapeError("concat needs at least one tensor")
    ref = xs[0].shape
    for t in xs[1:]:
        if (t.shape[0],) + t.shape[2:] != (ref[0],) + ref[2:]:
            raise ShapeError(f"concat shape mismatch: {ref} vs {t.shape}")
    _check_same_dtype(*xs)
    out = np.concatenate([t.data for t in xs], axis=1)
    offsets = np.cumsum([0] + [t.shape[1] for t in xs])

    def backward(g):
        return [g[:, offsets[i]:offsets[i + 1]] for i in range(len(xs))]

    return _emit("concat", name, tuple(xs), out, backward, counter, tape)


def split_channels(x: Tensor, sizes: Sequence[int], *, tape=None) -> list[Tensor]:
    """Inverse of concat_channels at the given channel counts."""
    if sum(sizes) != x.shape[1] or min(sizes) < 1:
        raise ShapeError(f"split sizes {list(sizes)} do not partition {x.shape[1]} channels")
    outs = []
    start = 0
    for s in sizes:
        lo, hi = start, start + s

        def backward(g, lo=lo, hi=hi):
            dx = np.zeros_like(x.data)
            dx[:, lo:hi] = g
            return (dx,)

        outs.append(_emit("split", None, (x,), x.data[:, lo:hi].copy(), backward, None, tape))
        start = hi
    return outs


def add(xs: Sequence[Tensor], *, counter=None, tape=None, name=None) -> Tensor:
    if not xs:
        raise ShapeError("add needs at least one tensor")
    for t in xs[1:]:
        if t.shape != xs[0].shape:
            raise ShapeError(f"add shape mismatch: {xs[0].shape} vs {t.shape}")
    _check_same_dtype(*xs)
    out = xs[0].data.copy()
    for t in xs[1:]:
        out += t.data

    def backward(g):
        return [g] * len(xs)

    return _emit("add", name, tuple(xs), out, backward, counter, tape)


def scale_channels(x: Tensor, s: Tensor, *, counter=None, tape=None, name=None) -> Tensor:
    """Multiply each channel of x by a per-(batch, channel) scalar s of shape (B, C, 1, 1)."""
    if s.shape != (x.shape[0], x.shape[1], 1, 1):
        raise ShapeError(f"channel scales shape {s.shape} does not match input shape {x.shape}")
    out = x.data * s.data

    def backward(g):
        return g * s.data, (g * x.data).sum(axis=(2, 3), keepdims=True)

    return _emit("scale_channels", name, (x, s), out, backward, counter, tape)
