"""Declarative network configs (YAML) validated with pydantic.

Two kinds are accepted: ``detector`` (the full CSL-YOLO graph) and
``sequential`` (a flat stack of layers, handy for toy cost checks).
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Annotated, Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .csl import (BackboneSpec, CslModuleSpec, DetectorSpec, GroupSpec, SpecError, build_csl_module,
                  build_detector, check_pyramid)
from .graph import MIDDLE_RULES, GraphBuilder, Network

HEAD_LAYOUT = "tx,ty,tw,th,obj,cls"


class ConfigError(ValueError):
    """Invalid config; the message starts with the dotted path of the offending key."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GroupConfig(_Strict):
    modules: int = Field(ge=1)
    width: int = Field(ge=2)
    downsample: bool = True


class BackboneConfig(_Strict):
    stem: int = Field(ge=1)
    expansion: int = Field(3, ge=1)
    se_reduction: int = Field(4, ge=1)
    groups: list[GroupConfig] = Field(min_length=3)
    taps: list[int] | None = None


class FpnConfig(_Strict):
    width: int = Field(ge=2)
    repeats: int = Field(3, ge=0)
    middle_rule: Literal["geometric", "arithmetic", "pow2"] = "geometric"
    expansion: int = Field(2, ge=1)


class HeadConfig(_Strict):
    layout: Literal["tx,ty,tw,th,obj,cls"] = HEAD_LAYOUT


class DetectorConfig(_Strict):
    kind: Literal["detector"] = "detector"
    input_size: int = Field(416, ge=32)
    num_classes: int = Field(80, ge=1)
    anchors_per_level: int = Field(3, ge=1)
    seed: int = 0
    backbone: BackboneConfig
    fpn: FpnConfig
    head: HeadConfig = HeadConfig()

    @field_validator("input_size")
    @classmethod
    def _multiple_of_32(cls, v):
        if v % 32:
            raise ValueError(f"input_size must be a multiple of 32, got {v}")
        return v

    def to_spec(self) -> DetectorSpec:
        bb = self.backbone
        return DetectorSpec(
            backbone=BackboneSpec(bb.stem, tuple(GroupSpec(g.modules, g.width, g.downsample) for g in bb.groups),
                                  bb.expansion, bb.se_reduction, None if bb.taps is None else tuple(bb.taps)),
            fpn_width=self.fpn.width,
            repeats=self.fpn.repeats,
            middle_rule=self.fpn.middle_rule,
            fpn_expansion=self.fpn.expansion,
            num_classes=self.num_classes,
            anchors_per_level=self.anchors_per_level,
            seed=self.seed,
        )


class ConvLayer(_Strict):
    op: Literal["conv"]
    out_ch: int = Field(ge=1)
    kernel: int = Field(3, ge=1)
    stride: Literal[1, 2] = 1
    bias: bool = False


class PointwiseLayer(_Strict):
    op: Literal["pointwise"]
    out_ch: int = Field(ge=1)
    bias: bool = False


class DepthwiseLayer(_Strict):
    op: Literal["depthwise"]
    kernel: int = Field(3, ge=1)
    multiplier: int = Field(1, ge=1)
    stride: Literal[1, 2] = 1


class CslLayer(_Strict):
    op: Literal["csl"]
    out_ch: int = Field(ge=2)
    expansion: int = Field(2, ge=1)
    kernel: int = Field(3, ge=1)
    variant: Literal["plain", "attention", "downsample"] = "plain"
    se_reduction: int = Field(4, ge=1)


class ActLayer(_Strict):
    op: Literal["mish", "sigmoid", "affine"]


class PoolLayer(_Strict):
    op: Literal["pool"]
    kind: Literal["max", "avg"] = "max"
    window: int = Field(2, ge=1)
    stride: int = Field(2, ge=1)


Layer = Annotated[Union[ConvLayer, PointwiseLayer, DepthwiseLayer, CslLayer, ActLayer, PoolLayer],
                  Field(discriminator="op")]


class SequentialConfig(_Strict):
    kind: Literal["sequential"]
    input_size: int = Field(ge=1)
    in_channels: int = Field(3, ge=1)
    seed: int = 0
    layers: list[Layer] = Field(min_length=1)

    @model_validator(mode="after")
    def _odd_kernels(self):
        for i, layer in enumerate(self.layers):
            k = getattr(layer, "kernel", 1)
            if k % 2 == 0:
                raise ValueError(f"layers.{i}.kernel must be odd, got {k}")
        return self


NetworkConfig = Union[DetectorConfig, SequentialConfig]


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(doc) -> NetworkConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"<root>: config must be a mapping, got {type(doc).__name__}")
    kind = doc.get("kind", "detector")
    model = {"detector": DetectorConfig, "sequential": SequentialConfig}.get(kind)
    if model is None:
        raise ConfigError(f"kind: unknown config kind {kind!r}")
    try:
        return model.model_validate(doc)
    except ValidationError as e:
        raise ConfigError(_format_error(e)) from None


def load_config(path: str | Path | None = None) -> NetworkConfig:
    """Load a YAML config; ``None`` loads the packaged default detector."""
    if path is None:
        text = resources.files("cslyolo").joinpath("configs/default.yaml").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"<file>: cannot read {path}: {e.strerror}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "<unknown>"
        raise ConfigError(f"<yaml {where}>: {getattr(e, 'problem', e)}") from None
    return parse_config(doc)


def packaged_config(name: str) -> NetworkConfig:
    text = resources.files("cslyolo").joinpath(f"configs/{name}.yaml").read_text()
    return parse_config(yaml.safe_load(text))


def build_network(cfg: NetworkConfig) -> Network:
    try:
        if isinstance(cfg, DetectorConfig):
            net = build_detector(cfg.to_spec())
            _check_detector(net, cfg)
            return net
        return _build_sequential(cfg)
    except SpecError as e:
        raise ConfigError(f"{_spec_path(cfg)}: {e}") from None


def _spec_path(cfg) -> str:
    return "backbone" if isinstance(cfg, DetectorConfig) else "layers"


def _check_detector(net: Network, cfg: DetectorConfig) -> None:
    check_pyramid(net, net.outputs, cfg.input_size)


def _build_sequential(cfg: SequentialConfig) -> Network:
    b = GraphBuilder(cfg.seed)
    h = b.input("input", cfg.in_channels)
    for i, layer in enumerate(cfg.layers):
        name = f"l{i}.{layer.op}"
        if isinstance(layer, ConvLayer):
            h = b.conv(h, layer.out_ch, layer.kernel, layer.stride, name=name, bias=layer.bias)
        elif isinstance(layer, PointwiseLayer):
            h = b.pointwise(h, layer.out_ch, name=name, bias=layer.bias)
        elif isinstance(layer, DepthwiseLayer):
            h = b.depthwise(h, layer.kernel, layer.multiplier, layer.stride, name=name)
        elif isinstance(layer, CslLayer):
            try:
                spec = CslModuleSpec(b.channels[h], layer.out_ch, layer.expansion, layer.kernel,
                                     layer.variant, layer.se_reduction)
            except SpecError as e:
                raise ConfigError(f"layers.{i}: {e}") from None
            h = build_csl_module(b, h, spec, prefix=f"l{i}.csl")
        elif isinstance(layer, PoolLayer):
            h = b.pool(h, layer.kind, layer.window, layer.stride, name=name)
        elif layer.op == "affine":
            h = b.affine(h, name=name)
        else:
            h = getattr(b, layer.op)(h, name=name)
    return b.build([h])


__all__ = [
    "ConfigError", "DetectorConfig", "SequentialConfig", "NetworkConfig", "MIDDLE_RULES",
    "parse_config", "load_config", "packaged_config", "build_network",
]
