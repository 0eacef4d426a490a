"""``cslyolo`` command line: summary, verify, anchors, decode, gradcheck.

Exit codes: 0 success, 1 a verification or assertion failed, 2 usage,
config or input-file error. ``CSLYOLO_SEED`` overrides the default seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cost
from .anchors import AnnotationError, LoadStats, default_anchor_set, generate_anchors, load_boxes, read_anchor_csv
from .config import ConfigError, DetectorConfig, build_network, load_config, packaged_config, parse_config
from .gradcheck import csl_suite, detector_check, primitive_suite
from .postprocess import MODES, decode_outputs, format_detections, soft_nms, to_coco_results
from .tensor import Tensor
from .tensorio import TensorFileError, export_weights, import_weights, load_any, save_named

SEED_ENV = "CSLYOLO_SEED"
EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# published budget of the reference detector: MFLOPs per input size, and parameters
MFLOPS_TARGETS = {224: 425, 320: 869, 416: 1470, 512: 2223}
PARAMS_TARGET = 3.2e6

class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _load(path, input_size):
    cfg = load_config(path)
    if input_size is not None:
        cfg = parse_config({**cfg.model_dump(), "input_size": input_size})
    return cfg


# -- summary ------------------------------------------------------------------

def calibration_lines(report: cost.CostReport, cfg) -> list[str]:
    if not isinstance(cfg, DetectorConfig):
        return []
    res = report.input_res[0]
    mflops = report.total_analytic / 1e6
    lines = []
    target = MFLOPS_TARGETS.get(res)
    if target is None:
        lines.append(f"calibration: {mflops:.1f} MFLOPs at {res}x{res} (no published target at this size)")
    else:
        lines.append(f"calibration: {mflops:.1f} MFLOPs vs target {target} at {res}x{res} "
                     f"({(mflops - target) / target:+.1%})")
    p = report.total_params
    lines.append(f"calibration: {p / 1e6:.3f}M params vs target {PARAMS_TARGET / 1e6:.1f}M "
                 f"({(p - PARAMS_TARGET) / PARAMS_TARGET:+.1%})")
    return lines


MAC_NOTE = "MACs count as FLOP units; bias, activation, pooling, resize and affine layers cost 0"


def _report_json(report: cost.CostReport, calib: list[str]) -> str:
    doc = {
        "input_res": list(report.input_res),
        "layers": [
            {"name": r.name, "op": r.op, "out_shape": list(r.out_shape), "analytic_macs": r.analytic_macs,
             "empirical_macs": r.empirical_macs, "params": r.params}
            for r in report.rows
        ],
        "total_macs": report.total_analytic,
        "total_empirical_macs": report.total_empirical,
        "total_params": report.total_params,
        "mflops": report.total_analytic / 1e6,
        "notes": report.footnotes,
        "calibration": calib,
    }
    return json.dumps(doc, indent=1) + "\n"


def cmd_summary(args) -> int:
    cfg = _load(args.config, args.input_size)
    net = build_network(cfg)
    report = cost.network_cost(net, cfg.input_size, empirical=args.empirical, seed=args.seed)
    report.footnotes.append(MAC_NOTE)
    calib = calibration_lines(report, cfg)
    if args.format == "table":
        sys.stdout.write(report.to_table())
        for line in calib:
            print(line)
    elif args.format == "csv":
        sys.stdout.write(report.to_csv())
        for line in calib:
            print(line, file=sys.stderr)
    else:
        sys.stdout.write(_report_json(report, calib))
    if args.export_weights:
        export_weights(net, args.export_weights)
        print(f"wrote {len(net.params)} weight tensors to {args.export_weights}", file=sys.stderr)
    if args.empirical and report.mismatches():
        for r in report.mismatches():
            print(f"mismatch: {r.name}: analytic {r.analytic_macs} != empirical {r.empirical_macs}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


# -- verify -------------------------------------------------------------------

def cmd_verify(args) -> int:
    cfg = _load(args.config, args.input_size)
    net = build_network(cfg)
    ok = True
    totals = set()
    for trial in range(args.trials):
        seed = args.seed + trial
        report = cost.network_cost(net, cfg.input_size, empirical=True, seed=seed)
        bad = report.mismatches()
        totals.add(report.total_analytic)
        status = "ok  " if not bad else "FAIL"
        print(f"{status} trial {trial} (seed {seed}): {len(report.rows)} layers, "
              f"analytic {report.total_analytic} MACs, empirical {report.total_empirical} MACs")
        for r in bad:
            print(f"     layer {r.name} ({r.op}): analytic {r.analytic_macs} != empirical {r.empirical_macs}")
        ok &= not bad
    if len(totals) > 1:
        print(f"FAIL analytic totals differ across trials: {sorted(totals)}")
        ok = False
    rows = cost.speedup_analysis()
    sys.stdout.write(cost.speedup_report(rows))
    for r in rows:
        if r.rel_gap >= 0.01:
            print(f"FAIL t={r.expansion:g}: exact ratio {r.exact:.4f} is {r.rel_gap:.2%} from the limit {r.limit:.4f}")
            ok = False
    print("verify: PASS" if ok else "verify: FAIL")
    return EXIT_OK if ok else EXIT_FAIL


# -- anchors ------------------------------------------------------------------

def _histogram(aset) -> list[str]:
    peak = max([lv.boxes for lv in aset.levels] + [1])
    lines = []
    for lv in aset.levels:
        bar = "#" * round(40 * lv.boxes / peak)
        flags = [f for f, on in (("fallback", lv.fallback), ("clamped", lv.clamped)) if on]
        tail = f"  [{', '.join(flags)}]" if flags else ""
        lines.append(f"level {lv.level} [{lv.lower:.4f}, {lv.upper:.4f}) {lv.boxes:>7d} {bar}{tail}")
    return lines


def cmd_anchors(args) -> int:
    stats = LoadStats()
    boxes = load_boxes(args.annotations, stats)
    if stats.dropped_degenerate or stats.clipped:
        print(f"loaded {stats.loaded} boxes; dropped {stats.dropped_degenerate} zero-area, "
              f"clipped {stats.clipped} oversize", file=sys.stderr)
    if not boxes:
        print(f"error: {args.annotations} contains no usable boxes", file=sys.stderr)
        return EXIT_FAIL
    aset = generate_anchors(boxes, args.levels, args.per_level, args.seed,
                            scale_rule=args.scale_rule, center=args.center)
    txt, csv_path = Path(f"{args.out_prefix}.txt"), Path(f"{args.out_prefix}.csv")
    txt.write_text(aset.to_text())
    csv_path.write_text(aset.to_csv())
    print(f"{len(boxes)} boxes, {args.levels} levels, k={args.per_level}: {aset.total} anchors")
    for line in _histogram(aset):
        print(line)
    sys.stdout.write(aset.to_text())
    print(f"wrote {txt} and {csv_path}")
    return EXIT_OK


# -- decode -------------------------------------------------------------------

def _int_at_least(lo):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}, got {v}")
        return v
    return parse


def _parse_image_size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError(f"image size must be positive, got {text!r}")
    return w, h


def _raw_outputs(args):
    """Head outputs as a list of (C, H, W) arrays, plus class and anchor counts when a config is used."""
    if args.raw:
        tensors = load_any(args.raw)
        return list(tensors.values()), None, None
    cfg = _load(args.config, args.input_size)
    if not isinstance(cfg, DetectorConfig):
        raise ConfigError("kind: decode needs a detector config")
    net = build_network(cfg)
    rng = np.random.default_rng(args.seed)
    shapes = net.infer_shapes((1, net.input_channels[0], cfg.input_size, cfg.input_size))
    if args.random:
        raws = [rng.standard_normal(shapes[o]).astype(np.float32) for o in net.outputs]
    else:
        if args.weights:
            net = import_weights(net, args.weights)
        x = Tensor(rng.standard_normal((1, net.input_channels[0], cfg.input_size, cfg.input_size)).astype(np.float32))
        raws = [o.data for o in net.forward(x)]
    if args.save_raw:
        save_named(args.save_raw, {name: r for name, r in zip(net.outputs, raws)})
    return raws, cfg.num_classes, cfg.anchors_per_level


def cmd_decode(args) -> int:
    raws, num_classes, k = _raw_outputs(args)
    if args.anchors:
        aset = read_anchor_csv(args.anchors)
    else:
        aset = default_anchor_set(len(raws), args.per_level or k or 3)
    try:
        dets = decode_outputs(raws, aset.per_level, args.mode, args.thresh, num_classes)
    except ValueError as e:
        raise UsageError(f"raw outputs do not match anchors: {e}") from None
    kept = soft_nms(dets, args.sigma, args.final_thresh)
    if args.format == "coco":
        w, h = args.image_size
        entries = to_coco_results(kept, args.image_id, w, h)
        text = "[\n" + ",\n".join(json.dumps(e) for e in entries) + ("\n]\n" if entries else "]\n")
    else:
        text = format_detections(kept)
    if args.out:
        Path(args.out).write_text(text)
        print(f"{len(kept)} detections written to {args.out}", file=sys.stderr)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    cfg = packaged_config(args.size)
    groups = {
        "primitives": primitive_suite(args.seed),
        "csl modules": csl_suite(args.seed),
        "toy detector": [detector_check(build_network(cfg), cfg.input_size, args.seed)],
    }
    results = [r for rs in groups.values() for r in rs]
    for r in results:
        print(r.line())
    for label, rs in groups.items():
        print(f"{label}: max rel err {max(r.max_rel_err for r in rs):.2e} (tol {rs[0].tol:g})")
    failed = [r for r in results if not r.passed]
    print("gradcheck: PASS" if not failed else f"gradcheck: FAIL ({len(failed)} checks)")
    return EXIT_OK if not failed else EXIT_FAIL


# -- entry point ----------------------------------------------------------------

def build_parser(default_seed: int) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cslyolo", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log info messages")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--config", help="YAML config (default: packaged default detector)")
        sp.add_argument("--input-size", type=_int_at_least(1), help="override the config's input size")

    s = sub.add_parser("summary", help="per-layer MACs and parameters")
    config_args(s)
    s.add_argument("--format", choices=("table", "csv", "json"), default="table")
    s.add_argument("--empirical", action="store_true", help="also count MACs with a random forward pass")
    s.add_argument("--export-weights", metavar="FILE", help="write the initialized weights")
    s.add_argument("--seed", type=int, default=default_seed)
    s.set_defaults(fn=cmd_summary)

    v = sub.add_parser("verify", help="check analytic against counted MACs for every layer")
    config_args(v)
    v.add_argument("--trials", type=_int_at_least(1), default=1)
    v.add_argument("--seed", type=int, default=default_seed)
    v.set_defaults(fn=cmd_verify)

    a = sub.add_parser("anchors", help="scale-binned IoU K-means anchors from COCO annotations")
    a.add_argument("--annotations", required=True, metavar="FILE")
    a.add_argument("--levels", type=_int_at_least(2), default=5)
    a.add_argument("--per-level", type=_int_at_least(1), default=3)
    a.add_argument("--seed", type=int, default=default_seed)
    a.add_argument("--scale-rule", choices=("geometric", "max"), default="geometric")
    a.add_argument("--center", choices=("mean", "medoid"), default="mean")
    a.add_argument("--out-prefix", default="anchors", help="writes PREFIX.txt and PREFIX.csv")
    a.set_defaults(fn=cmd_anchors)

    d = sub.add_parser("decode", help="decode head outputs and apply soft-NMS")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--raw", metavar="FILE", help="CSLT tensor or named-tensor file of head outputs")
    src.add_argument("--random", action="store_true", help="standard-normal head outputs at the config's shapes")
    src.add_argument("--forward", action="store_true", help="run the network on a random image")
    config_args(d)
    d.add_argument("--weights", metavar="FILE", help="weights for --forward")
    d.add_argument("--save-raw", metavar="FILE", help="save generated head outputs")
    d.add_argument("--anchors", metavar="CSV", help="anchor CSV (default: evenly spaced priors per level)")
    d.add_argument("--per-level", type=_int_at_least(1),
                   help="anchors per level when --anchors is absent (default: the config's, else 3)")
    d.add_argument("--mode", choices=MODES, default="additive")
    d.add_argument("--sigma", type=float, default=0.5)
    d.add_argument("--thresh", type=float, default=0.3)
    d.add_argument("--final-thresh", type=float, default=0.001)
    d.add_argument("--image-id", type=int, default=0)
    d.add_argument("--image-size", type=_parse_image_size, default=(416, 416), metavar="WxH")
    d.add_argument("--format", choices=("coco", "table"), default="coco")
    d.add_argument("--out", metavar="FILE")
    d.add_argument("--seed", type=int, default=default_seed)
    d.set_defaults(fn=cmd_decode)

    g = sub.add_parser("gradcheck", help="finite-difference check of the reverse-mode rules")
    g.add_argument("--size", choices=("toy",), default="toy")
    g.add_argument("--seed", type=int, default=default_seed)
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        parser = build_parser(_default_seed())
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.command == "decode" and args.weights and not args.forward:
        print("error: --weights only applies with --forward", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"error: config: {e}", file=sys.stderr)
    except (AnnotationError, TensorFileError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_FAIL
    except OSError as e:
        print(f"error: {e.filename}: {e.strerror}", file=sys.stderr)
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
