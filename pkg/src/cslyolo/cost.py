"""Analytic MAC and parameter model.

Costs are multiply-accumulates (one MAC is one FLOP unit). Bias adds,
activations, pooling, resizing and affine layers cost zero. Everything here
is computed from shapes alone and serves as the oracle for the counts the
ops report at run time.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

CSL_TERM_NAMES = (
    "skip_pointwise",
    "candidate_depthwise",
    "input_depthwise",
    "fused_depthwise",
    "projection_pointwise",
)


@dataclass(frozen=True)
class ConvShapeQuery:
    out_h: int
    out_w: int
    in_ch: int
    out_ch: int
    kernel: int = 3
    expansion: float = 1

    def __post_init__(self):
        for f in ("out_h", "out_w", "in_ch", "out_ch", "kernel"):
            v = getattr(self, f)
            if int(v) != v or v < 1:
                raise ValueError(f"{f} must be a positive integer, got {v}")
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.expansion < 1:
            raise ValueError(f"expansion must be >= 1, got {self.expansion}")

    @property
    def pixels(self) -> int:
        return self.out_h * self.out_w


def conv_flops(q: ConvShapeQuery) -> int:
    """H' * W' * C * K^2 * N."""
    return q.out_h * q.out_w * q.in_ch * q.kernel ** 2 * q.out_ch


def depthwise_flops(q: ConvShapeQuery, multiplier: int = 1) -> int:
    """Depthwise cost: C independent single-channel convolutions, each with ``multiplier`` filters."""
    return q.in_ch * conv_flops(ConvShapeQuery(q.out_h, q.out_w, 1, multiplier, q.kernel))


def csl_channel_split(out_ch: int, expansion) -> tuple[int, int]:
    """Return (N/2, t*N/2), rejecting shapes where either is not an integer."""
    if out_ch % 2:
        raise ValueError(f"out_ch must be even so the output splits in halves, got {out_ch}")
    half = out_ch // 2
    cand = Fraction(expansion).limit_denominator(1000) * half
    if cand.denominator != 1:
        raise ValueError(f"expansion * out_ch / 2 must be integral, got {float(cand)}")
    return half, int(cand)


def csl_flops(q: ConvShapeQuery) -> tuple[int, tuple[int, int, int, int, int]]:
    """Five-term cost of a stride-1 CSL module, in the fixed order of CSL_TERM_NAMES."""
    half, cand = csl_channel_split(q.out_ch, q.expansion)
    hw, c, k2 = q.pixels, q.in_ch, q.kernel ** 2
    fused = c + cand
    terms = (
        hw * c * half,
        cand * hw * k2,
        hw * c * k2,
        hw * fused * k2,
        hw * fused * half,
    )
    return sum(terms), terms


def speedup_ratio(q: ConvShapeQuery) -> float:
    """Exact conv_flops / csl_flops for the same query."""
    return conv_flops(q) / csl_flops(q)[0]


def asymptotic_speedup(expansion: float, kernel: int = 3) -> float:
    """Large-N limit of the speed-up at C = N: K^2 / (1 + 0.25 t).

    Only the two pointwise terms grow with N^2 (N^2/2 and N^2/2 + t N^2/4).
    """
    return kernel ** 2 / (1 + 0.25 * expansion)


# -- per-layer analytic model over graph nodes -------------------------------

def layer_macs(op: str, attrs: dict, in_shapes, out_shape) -> int:
    b, n, ho, wo = out_shape
    if op in ("conv", "pointwise"):
        c = in_shapes[0][1]
        return b * conv_flops(ConvShapeQuery(ho, wo, c, n, attrs["kernel"]))
    if op == "depthwise":
        c = in_shapes[0][1]
        return b * depthwise_flops(ConvShapeQuery(ho, wo, c, attrs["multiplier"], attrs["kernel"]), attrs["multiplier"])
    return 0


def layer_params(op: str, attrs: dict, in_shapes) -> int:
    if op in ("conv", "pointwise"):
        c = in_shapes[0][1]
        n, k = attrs["out_ch"], attrs["kernel"]
        return k * k * c * n + (n if attrs.get("bias") else 0)
    if op == "depthwise":
        c = in_shapes[0][1]
        return attrs["kernel"] ** 2 * c * attrs["multiplier"]
    if op == "affine":
        return 2 * in_shapes[0][1]
    return 0


# -- reports ------------------------------------------------------------------

@dataclass(frozen=True)
class CostRow:
    name: str
    op: str
    out_shape: tuple[int, ...]
    analytic_macs: int
    empirical_macs: int | None
    params: int


@dataclass
class CostReport:
    rows: list[CostRow]
    input_res: tuple[int, int]
    footnotes: list[str] = field(default_factory=list)

    @property
    def total_analytic(self) -> int:
        return sum(r.analytic_macs for r in self.rows)

    @property
    def total_empirical(self) -> int | None:
        if any(r.empirical_macs is None for r in self.rows):
            return None
        return sum(r.empirical_macs for r in self.rows)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    def mismatches(self) -> list[CostRow]:
        return [r for r in self.rows if r.empirical_macs is not None and r.empirical_macs != r.analytic_macs]

    def to_table(self) -> str:
        header = ("layer", "output shape", "analytic MACs", "empirical MACs", "params")
        body = [
            (r.name, "x".join(map(str, r.out_shape)), str(r.analytic_macs),
             "-" if r.empirical_macs is None else str(r.empirical_macs), str(r.params))
            for r in self.rows
        ]
        emp = self.total_empirical
        body.append(("TOTAL", f"{self.input_res[0]}x{self.input_res[1]} input", str(self.total_analytic),
                     "-" if emp is None else str(emp), str(self.total_params)))
        widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]

        def fmt(row):
            first = row[0].ljust(widths[0]) + "  " + row[1].ljust(widths[1])
            rest = "  ".join(cell.rjust(w) for cell, w in zip(row[2:], widths[2:]))
            return (first + "  " + rest).rstrip()

        lines = [fmt(header), "-" * (sum(widths) + 2 * (len(widths) - 1))]
        lines += [fmt(r) for r in body[:-1]]
        lines.append(lines[1])
        lines.append(fmt(body[-1]))
        lines.append(f"MFLOPs (MACs/1e6): {self.total_analytic / 1e6:.1f}   params: {self.total_params / 1e6:.3f}M")
        lines += [f"note: {n}" for n in self.footnotes]
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "analytic_macs", "empirical_macs", "params"])
        for r in self.rows:
            w.writerow([r.name, r.analytic_macs, "" if r.empirical_macs is None else r.empirical_macs, r.params])
        return buf.getvalue()


@dataclass(frozen=True)
class SpeedupRow:
    expansion: float
    channels: int
    exact: float
    limit: float

    @property
    def rel_gap(self) -> float:
        return abs(self.exact - self.limit) / self.limit


QUOTED_SPEEDUPS = {2: 7.2, 3: 5.1}


def speedup_analysis(channels: int = 8192, expansions=(2, 3), size: int = 1) -> list[SpeedupRow]:
    rows = []
    for t in expansions:
        q = ConvShapeQuery(size, size, channels, channels, 3, t)
        rows.append(SpeedupRow(t, channels, speedup_ratio(q), asymptotic_speedup(t)))
    return rows


def speedup_report(rows: list[SpeedupRow]) -> str:
    lines = ["speed-up of CSL module over dense 3x3 conv (C = N, K = 3)",
             f"{'t':>4}  {'C=N':>6}  {'exact':>8}  {'9/(1+t/4)':>9}  {'gap':>7}  quoted"]
    notes = []
    for r in rows:
        quoted = QUOTED_SPEEDUPS.get(r.expansion)
        qs = "-" if quoted is None else f"{quoted:.1f}"
        lines.append(f"{r.expansion:>4g}  {r.channels:>6d}  {r.exact:>8.4f}  {r.limit:>9.4f}  {r.rel_gap:>7.2%}  {qs}")
        if quoted is not None and not math.isclose(quoted, r.limit, rel_tol=0.02):
            notes.append(
                f"note: the quoted {quoted:.1f}x for t={r.expansion:g} does not follow from the closed form "
                f"9/(1+0.25t) = {r.limit:.2f}x; exact evaluation agrees with the closed form, not the quote."
            )
    return "\n".join(lines + notes) + "\n"


def network_cost(net, input_res, *, batch: int = 1, empirical: bool = True, seed: int = 0) -> CostReport:
    """Per-layer analytic costs, plus counted MACs from a random forward pass when ``empirical``.

    Parameters shared between nodes are attributed to the first node that uses them.
    """
    import numpy as np

    from .tensor import MacCounter, Tensor

    h, w = (input_res, input_res) if isinstance(input_res, int) else tuple(input_res)
    in_shapes = [(batch, c, h, w) for c in net.input_channels]
    shapes = net.infer_shapes(*in_shapes)
    counter = None
    if empirical:
        rng = np.random.default_rng(seed)
        xs = [Tensor(rng.standard_normal(s).astype(np.float32)) for s in in_shapes]
        counter = MacCounter()
        net.forward(*xs, counter=counter)
    rows = []
    seen: set[str] = set()
    for n in net.nodes:
        if n.op == "input":
            continue
        ins = [shapes[i] for i in n.inputs]
        fresh = [p for p in n.params if p not in seen]
        seen.update(n.params)
        rows.append(CostRow(
            name=n.name,
            op=n.op,
            out_shape=shapes[n.name],
            analytic_macs=layer_macs(n.op, n.attr, ins, shapes[n.name]),
            empirical_macs=None if counter is None else counter.per_layer.get(n.name, 0),
            params=layer_params(n.op, n.attr, ins) if fresh else 0,
        ))
    return CostReport(rows, (h, w))
