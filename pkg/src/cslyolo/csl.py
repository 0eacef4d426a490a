"""CSL-Module, CSL-Bone, CSL-FPN and the assembled detector as graphs.

Module wiring (X is the block input, C channels; N output channels)::

    S = mish(bn(pointwise(X, N/2)))                      skip half
    U = concat(mish(bn(dw3x3(X))), mish(bn(dw3x3(S, x t))))  C + tN/2 maps
    F = mish(bn(dw3x3(U)))                               [SE] [adaptive pool /2]
    M = bn(pointwise(F, N/2))                            linear projection
    out = concat(S, M)                                   [S avg-pooled 2x2 if downsampling]

The five convolutions map one-to-one onto the terms of ``cost.csl_flops``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .graph import GraphBuilder, Network
from .tensor import ShapeError

VARIANTS = ("plain", "attention", "downsample")
TAP_STRIDES = (8, 16, 32)


class SpecError(ValueError):
    """A builder spec violates one of its named constraints."""


@dataclass(frozen=True)
class CslModuleSpec:
    in_ch: int
    out_ch: int
    expansion: int = 2
    kernel: int = 3
    variant: str = "plain"
    se_reduction: int = 4

    def __post_init__(self):
        if self.in_ch < 1 or self.out_ch < 1:
            raise SpecError(f"channels must be positive: in_ch={self.in_ch}, out_ch={self.out_ch}")
        if self.out_ch % 2:
            raise SpecError(f"out_ch must be even (output is two halves), got {self.out_ch}")
        if int(self.expansion) != self.expansion or self.expansion < 1:
            raise SpecError(f"expansion must be a positive integer depthwise multiplier, got {self.expansion}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise SpecError(f"kernel must be odd, got {self.kernel}")
        if self.variant not in VARIANTS:
            raise SpecError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "attention" and self.fused_ch % self.se_reduction:
            raise SpecError(f"SE reduction {self.se_reduction} must divide the fused channel count {self.fused_ch}")

    @property
    def half(self) -> int:
        return self.out_ch // 2

    @property
    def candidates(self) -> int:
        return self.expansion * self.half

    @property
    def fused_ch(self) -> int:
        return self.in_ch + self.candidates


def build_se_block(b: GraphBuilder, x: str, ch: int, reduction: int, *, prefix: str) -> str:
    if reduction < 1 or ch % reduction:
        raise SpecError(f"SE reduction {reduction} must divide channel count {ch}")
    if b.channels[x] != ch:
        raise ShapeError(f"SE block for {ch} channels applied to {b.channels[x]}-channel input")
    g = b.global_pool(x, name=f"{prefix}.squeeze")
    g = b.pointwise(g, ch // reduction, name=f"{prefix}.reduce", bias=True)
    g = b.mish(g, name=f"{prefix}.reduce.act")
    g = b.pointwise(g, ch, name=f"{prefix}.expand", bias=True)
    g = b.sigmoid(g, name=f"{prefix}.gate")
    return b.scale(x, g, name=f"{prefix}.scale")


def build_csl_module(b: GraphBuilder, x: str, spec: CslModuleSpec, *, prefix: str) -> str:
    if b.channels[x] != spec.in_ch:
        raise ShapeError(f"{prefix}: spec expects {spec.in_ch} input channels, got {b.channels[x]}")
    k, p = spec.kernel, prefix

    s = b.pointwise(x, spec.half, name=f"{p}.skip.pw")
    s = b.mish(b.affine(s, name=f"{p}.skip.bn"), name=f"{p}.skip.act")

    dx = b.depthwise(x, k, 1, name=f"{p}.expand.dw_in")
    dx = b.mish(b.affine(dx, name=f"{p}.expand.dw_in.bn"), name=f"{p}.expand.dw_in.act")
    ds = b.depthwise(s, k, spec.expansion, name=f"{p}.expand.dw_cand")
    ds = b.mish(b.affine(ds, name=f"{p}.expand.dw_cand.bn"), name=f"{p}.expand.dw_cand.act")
    u = b.concat([dx, ds], name=f"{p}.expand.cat")

    f = b.depthwise(u, k, 1, name=f"{p}.fuse.dw")
    f = b.mish(b.affine(f, name=f"{p}.fuse.bn"), name=f"{p}.fuse.act")
    if spec.variant == "attention":
        f = build_se_block(b, f, spec.fused_ch, spec.se_reduction, prefix=f"{p}.se")
    elif spec.variant == "downsample":
        f = b.adaptive_halve(f, name=f"{p}.down.pool")
        s = b.pool(s, "avg", 2, 2, name=f"{p}.down.skip_pool")

    m = b.pointwise(f, spec.half, name=f"{p}.proj.pw")
    m = b.affine(m, name=f"{p}.proj.bn")
    return b.concat([s, m], name=f"{p}.out")


def csl_module_network(spec: CslModuleSpec, seed: int = 0) -> Network:
    b = GraphBuilder(seed)
    x = b.input("input", spec.in_ch)
    return b.build([build_csl_module(b, x, spec, prefix="csl")])


def se_block_network(ch: int, reduction: int, seed: int = 0) -> Network:
    b = GraphBuilder(seed)
    x = b.input("input", ch)
    return b.build([build_se_block(b, x, ch, reduction, prefix="se")])


# -- backbone -------------------------------------------------------------------

@dataclass(frozen=True)
class GroupSpec:
    modules: int
    width: int
    downsample: bool = True


@dataclass(frozen=True)
class BackboneSpec:
    stem: int
    groups: tuple[GroupSpec, ...]
    expansion: int = 3
    se_reduction: int = 4
    taps: tuple[int, ...] | None = None
    in_ch: int = 3

    def tap_indices(self) -> tuple[int, ...]:
        return tuple(self.taps) if self.taps is not None else tuple(range(len(self.groups) - 3, len(self.groups)))

    def group_strides(self) -> list[int]:
        stride, out = 2, []
        for g in self.groups:
            stride *= 2 if g.downsample else 1
            out.append(stride)
        return out

    def validate(self):
        if len(self.groups) < 3:
            raise SpecError(f"backbone needs at least 3 groups, got {len(self.groups)}")
        for i, g in enumerate(self.groups):
            if g.modules < 1:
                raise SpecError(f"group {i}: module count must be >= 1")
        taps = self.tap_indices()
        if len(taps) != 3 or any(not 0 <= t < len(self.groups) for t in taps):
            raise SpecError(f"backbone must export exactly 3 valid group taps, got {taps}")
        strides = self.group_strides()
        got = tuple(strides[t] for t in taps)
        if got != TAP_STRIDES:
            raise SpecError(f"stride bookkeeping: taps {taps} have strides {got}, need {TAP_STRIDES}")


def build_backbone(b: GraphBuilder, x: str, spec: BackboneSpec, *, prefix: str = "bone") -> list[str]:
    """Stem conv (3x3, stride 2) then CSL groups; returns the stride 8/16/32 taps.

    A downsampling group starts with a 2x2 max pool. The first module of
    every group carries the SE attention variant; all modules use
    ``spec.expansion`` (3 by default).
    """
    spec.validate()
    h = b.conv(x, spec.stem, 3, 2, name=f"{prefix}.stem.conv")
    h = b.mish(b.affine(h, name=f"{prefix}.stem.bn"), name=f"{prefix}.stem.act")
    outs = []
    for gi, g in enumerate(spec.groups):
        if g.downsample:
            h = b.pool(h, "max", 2, 2, name=f"{prefix}.g{gi}.pool")
        for mi in range(g.modules):
            ms = CslModuleSpec(b.channels[h], g.width, spec.expansion,
                               variant="attention" if mi == 0 else "plain", se_reduction=spec.se_reduction)
            h = build_csl_module(b, h, ms, prefix=f"{prefix}.g{gi}.m{mi}")
        outs.append(h)
    return [outs[t] for t in spec.tap_indices()]


def backbone_network(spec: BackboneSpec, seed: int = 0) -> Network:
    b = GraphBuilder(seed)
    x = b.input("input", spec.in_ch)
    return b.build(build_backbone(b, x, spec))


# -- pyramid ------------------------------------------------------------------

def expand_pyramid(b: GraphBuilder, scales: Sequence[str], width: int, *, rule: str = "geometric",
                   expansion: int = 2, prefix: str = "fpn.expand") -> list[str]:
    """Project 3 scales to ``width`` channels and insert 2 middle levels; largest first."""
    if len(scales) != 3:
        raise SpecError(f"pyramid expansion needs exactly 3 input scales, got {len(scales)}")
    lat = []
    for i, s in enumerate(scales):
        p = b.pointwise(s, width, name=f"{prefix}.lat{i}")
        lat.append(b.affine(p, name=f"{prefix}.lat{i}.bn"))
    mids = []
    for j, (hi, lo) in enumerate(zip(lat[:-1], lat[1:])):
        a = b.resize(hi, (hi, lo), rule, name=f"{prefix}.mid{j}.down")
        c = b.resize(lo, (hi, lo), rule, name=f"{prefix}.mid{j}.up")
        s = b.add([a, c], name=f"{prefix}.mid{j}.sum")
        mids.append(build_csl_module(b, s, CslModuleSpec(width, width, expansion), prefix=f"{prefix}.mid{j}.csl"))
    return [lat[0], mids[0], lat[1], mids[1], lat[2]]


FUSION_SCHEDULE = ((1, 3), (0, 2, 4))


def build_fpn_repeat(b: GraphBuilder, levels: Sequence[str], repeats: int, *, expansion: int = 2,
                     prefix: str = "fpn.rep") -> list[str]:
    """Stack ``repeats`` fusion blocks over 5 levels.

    Each block first rebuilds levels 2 and 4 (1-indexed), then 1, 3 and 5,
    each from the sum of itself and its resized neighbours, followed by a
    CSL-Module. Same-scale inputs pass through unchanged.
    """
    levels = list(levels)
    if len(levels) != 5:
        raise SpecError(f"repeat stage needs 5 levels, got {len(levels)}")
    chans = {b.channels[l] for l in levels}
    if len(chans) != 1:
        raise ShapeError(f"repeat stage levels have differing channel counts {sorted(chans)}")
    if repeats < 0:
        raise SpecError(f"repeats must be >= 0, got {repeats}")
    width = chans.pop()
    for r in range(repeats):
        for half, ks in enumerate(FUSION_SCHEDULE):
            new = list(levels)
            for k in ks:
                p = f"{prefix}{r}.{'even' if half == 0 else 'odd'}.l{k}"
                srcs = []
                for j in (k - 1, k, k + 1):
                    if not 0 <= j < len(levels):
                        continue
                    if j == k:
                        srcs.append(levels[k])
                    else:
                        srcs.append(b.resize(levels[j], (levels[k],), name=f"{p}.from{j}"))
                s = b.add(srcs, name=f"{p}.sum")
                new[k] = build_csl_module(b, s, CslModuleSpec(width, width, expansion), prefix=f"{p}.csl")
            levels = new
    return levels


def check_pyramid(net: Network, level_names: Sequence[str], input_size: int) -> list[int]:
    shapes = net.infer_shapes((1,) + (net.input_channels[0], input_size, input_size))
    sizes = [shapes[n][2] for n in level_names]
    if any(a <= b for a, b in zip(sizes, sizes[1:])):
        raise SpecError(f"pyramid level sizes must strictly decrease, got {sizes} at input {input_size}")
    return sizes


# -- detector -------------------------------------------------------------------

@dataclass(frozen=True)
class DetectorSpec:
    backbone: BackboneSpec
    fpn_width: int
    repeats: int = 3
    middle_rule: str = "geometric"
    fpn_expansion: int = 2
    num_classes: int = 80
    anchors_per_level: int = 3
    seed: int = 0

    @property
    def head_channels(self) -> int:
        return self.anchors_per_level * (5 + self.num_classes)


def build_detector(spec: DetectorSpec) -> Network:
    """Backbone, pyramid expansion, R fusion blocks and one 1x1 head shared by all 5 levels."""
    b = GraphBuilder(spec.seed)
    x = b.input("input", spec.backbone.in_ch)
    taps = build_backbone(b, x, spec.backbone)
    levels = expand_pyramid(b, taps, spec.fpn_width, rule=spec.middle_rule, expansion=spec.fpn_expansion)
    levels = build_fpn_repeat(b, levels, spec.repeats, expansion=spec.fpn_expansion)
    outs = [b.pointwise(l, spec.head_channels, name=f"head.p{i}", bias=True, shared="head")
            for i, l in enumerate(levels)]
    return b.build(outs)
