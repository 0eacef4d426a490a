"""Scale-constrained anchor generation.

Ground-truth (w, h) pairs are binned by scale against thresholds
``[0, 1/2^(l-1), ..., 1/2, 1]`` and each bin is clustered on its own with
IoU-distance K-means, so each pyramid level gets priors of its own scale.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

SCALE_RULES = ("geometric", "max")
CENTER_RULES = ("mean", "medoid")


class AnnotationError(ValueError):
    pass


@dataclass(frozen=True)
class BoxWH:
    w: float
    h: float

    def __post_init__(self):
        if not (0 < self.w <= 1 and 0 < self.h <= 1):
            raise ValueError(f"normalized box sides must lie in (0, 1], got ({self.w}, {self.h})")

    @property
    def area(self) -> float:
        return self.w * self.h


def box_scale(w, h, rule: str = "geometric"):
    if rule == "geometric":
        return np.sqrt(np.multiply(w, h))
    if rule == "max":
        return np.maximum(w, h)
    raise ValueError(f"scale rule must be one of {SCALE_RULES}, got {rule!r}")


def iou_wh(a: BoxWH, b: BoxWH) -> float:
    """IoU of two boxes sharing a centre."""
    inter = min(a.w, b.w) * min(a.h, b.h)
    return inter / (a.w * a.h + b.w * b.h - inter)


def iou_matrix(boxes: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Pairwise co-centred IoU, (n, 2) x (k, 2) -> (n, k)."""
    inter = np.minimum(boxes[:, None, :], centers[None, :, :]).prod(axis=2)
    return inter / (boxes.prod(axis=1)[:, None] + centers.prod(axis=1)[None, :] - inter)


def as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    return np.array([(b.w, b.h) for b in boxes], dtype=np.float64).reshape(-1, 2)


# -- annotation ingestion -------------------------------------------------------

@dataclass
class LoadStats:
    loaded: int = 0
    dropped_degenerate: int = 0
    clipped: int = 0


def parse_coco(doc, stats: LoadStats | None = None) -> list[BoxWH]:
    """Normalize every annotation bbox by its image's size."""
    stats = stats if stats is not None else LoadStats()
    if not isinstance(doc, dict):
        raise AnnotationError("<root>: expected a JSON object")
    for key in ("images", "annotations"):
        if not isinstance(doc.get(key), list):
            raise AnnotationError(f"<root>.{key}: missing or not a list")
    sizes = {}
    for i, img in enumerate(doc["images"]):
        try:
            iid, w, h = img["id"], float(img["width"]), float(img["height"])
        except (KeyError, TypeError, ValueError):
            raise AnnotationError(f"images[{i}]: needs id, width and height") from None
        if w <= 0 or h <= 0:
            raise AnnotationError(f"images[{i}]: non-positive size {w}x{h}")
        sizes[iid] = (w, h)
    boxes = []
    for i, ann in enumerate(doc["annotations"]):
        if not isinstance(ann, dict) or "image_id" not in ann or "bbox" not in ann:
            raise AnnotationError(f"annotations[{i}]: needs image_id and bbox")
        if ann["image_id"] not in sizes:
            raise AnnotationError(f"annotations[{i}].image_id: unknown image id {ann['image_id']!r}")
        bbox = ann["bbox"]
        try:
            _, _, bw, bh = (float(v) for v in bbox)
        except (TypeError, ValueError):
            raise AnnotationError(f"annotations[{i}].bbox: expected [x, y, w, h] numbers, got {bbox!r}") from None
        iw, ih = sizes[ann["image_id"]]
        if bw <= 0 or bh <= 0:
            stats.dropped_degenerate += 1
            continue
        w, h = bw / iw, bh / ih
        if w > 1 or h > 1:
            stats.clipped += 1
            w, h = min(w, 1.0), min(h, 1.0)
        boxes.append(BoxWH(w, h))
    stats.loaded = len(boxes)
    if stats.dropped_degenerate:
        log.warning("dropped %d zero-area boxes", stats.dropped_degenerate)
    return boxes


def load_boxes(path, stats: LoadStats | None = None) -> list[BoxWH]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise AnnotationError(f"<json line {e.lineno}, column {e.colno}>: {e.msg}") from None
    return parse_coco(doc, stats)


def export_boxes(boxes: Sequence[BoxWH], path) -> None:
    """Write boxes as a COCO document over one 1x1 image, so reloading is exact."""
    doc = {
        "images": [{"id": 0, "width": 1, "height": 1}],
        "annotations": [{"id": i, "image_id": 0, "bbox": [0.0, 0.0, b.w, b.h]} for i, b in enumerate(boxes)],
    }
    Path(path).write_text(json.dumps(doc))


# -- binning ------------------------------------------------------------------

def scale_thresholds(levels: int) -> list[float]:
    if levels < 2:
        raise ValueError(f"need at least 2 levels, got {levels}")
    return [0.0] + [1.0 / 2 ** (levels - 1 - i) for i in range(levels)]


@dataclass
class ScaleBins:
    thresholds: list[float]
    bins: list[list[BoxWH]]
    scale_rule: str = "geometric"

    @property
    def empty(self) -> list[int]:
        return [i for i, b in enumerate(self.bins) if not b]


def bin_index(scales: np.ndarray, thresholds: Sequence[float]) -> np.ndarray:
    idx = np.searchsorted(np.asarray(thresholds), scales, side="right") - 1
    # the top bin is closed at 1
    return np.clip(idx, 0, len(thresholds) - 2)


def bin_by_scale(boxes: Sequence[BoxWH], levels: int, scale_rule: str = "geometric") -> ScaleBins:
    s = scale_thresholds(levels)
    arr = as_array(boxes)
    idx = bin_index(box_scale(arr[:, 0], arr[:, 1], scale_rule), s) if len(arr) else np.zeros(0, int)
    bins: list[list[BoxWH]] = [[] for _ in range(levels)]
    for b, i in zip(boxes, idx):
        bins[int(i)].append(b)
    for i in range(levels):
        if not bins[i]:
            log.info("scale bin %d [%g, %g) is empty", i, s[i], s[i + 1])
    return ScaleBins(s, bins, scale_rule)


# -- clustering ---------------------------------------------------------------

@dataclass
class KMeansResult:
    centers: np.ndarray  # (k, 2), ascending area
    assignment: np.ndarray  # (n,) indices into centers
    objective: float  # mean of 1 - IoU to the assigned centre
    trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def anchors(self) -> list[BoxWH]:
        return [BoxWH(float(w), float(h)) for w, h in self.centers]


def assignment_cost(boxes: np.ndarray, centers: np.ndarray, assignment: np.ndarray) -> float:
    iou = iou_matrix(boxes, centers)[np.arange(len(boxes)), assignment]
    return float(np.mean(1.0 - iou))


def _farthest_point_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(len(x)))]
    dmin = 1.0 - iou_matrix(x, x[chosen])[:, 0]
    for _ in range(1, k):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, 1.0 - iou_matrix(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def _mean(members: np.ndarray) -> np.ndarray:
    # shifted so a cluster of identical boxes reproduces the box exactly
    lo = members.min(axis=0)
    return lo + (members - lo).mean(axis=0)


def _medoid(members: np.ndarray) -> np.ndarray:
    d = 1.0 - iou_matrix(members, members)
    return members[int(np.argmin(d.sum(axis=1)))]


def kmeans_iou(boxes, k: int, seed: int = 0, *, max_iter: int = 300, center: str = "mean",
               init: np.ndarray | None = None) -> KMeansResult:
    """Lloyd iterations with d = 1 - IoU.

    Seeding is farthest-point from a seeded random first box. Assignment
    ties go to the lowest centre index; an empty cluster is re-seeded to
    the box currently farthest from its centre. Stops when assignments
    repeat or after ``max_iter`` rounds.
    """
    x = as_array(boxes)
    n = len(x)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if n < k:
        raise ValueError(f"need at least k={k} boxes, got {n}")
    if center not in CENTER_RULES:
        raise ValueError(f"center rule must be one of {CENTER_RULES}, got {center!r}")
    rng = np.random.default_rng(seed)
    c = _farthest_point_init(x, k, rng) if init is None else np.array(init, dtype=np.float64).reshape(k, 2)

    assign = None
    trace: list[float] = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        d = 1.0 - iou_matrix(x, c)
        new = np.argmin(d, axis=1)
        if assign is not None and np.array_equal(new, assign):
            converged = True
            break
        assign = new
        own = d[np.arange(n), assign].copy()
        for j in range(k):
            members = x[assign == j]
            if len(members):
                c[j] = _mean(members) if center == "mean" else _medoid(members)
            else:
                far = int(np.argmax(own))
                c[j] = x[far]
                own[far] = -1.0
        trace.append(assignment_cost(x, c, assign))

    order = np.lexsort((c[:, 0], c.prod(axis=1)))
    c = c[order]
    relabel = np.empty(k, dtype=int)
    relabel[order] = np.arange(k)
    assign = relabel[assign]
    return KMeansResult(c, assign, assignment_cost(x, c, assign), trace, it, converged)


# -- anchor sets ----------------------------------------------------------------

@dataclass
class LevelAnchors:
    level: int
    lower: float
    upper: float
    anchors: list[BoxWH]
    boxes: int
    fallback: bool = False
    clamped: bool = False
    objective: float | None = None


@dataclass
class AnchorSet:
    levels: list[LevelAnchors]
    scale_rule: str = "geometric"

    @property
    def per_level(self) -> list[list[BoxWH]]:
        return [lv.anchors for lv in self.levels]

    @property
    def total(self) -> int:
        return sum(len(lv.anchors) for lv in self.levels)

    def to_text(self) -> str:
        lines = []
        for lv in self.levels:
            pairs = " ".join(f"({a.w:.6f},{a.h:.6f})" for a in lv.anchors)
            flags = [f for f, on in (("fallback", lv.fallback), ("clamped", lv.clamped)) if on]
            lines.append(f"level {lv.level}: {pairs}" + (f"  # {', '.join(flags)}" if flags else ""))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "index", "w", "h", "fallback", "clamped"])
        for lv in self.levels:
            for i, a in enumerate(lv.anchors):
                w.writerow([lv.level, i, repr(a.w), repr(a.h), int(lv.fallback), int(lv.clamped)])
        return buf.getvalue()


def read_anchor_csv(path) -> AnchorSet:
    rows: dict[int, list] = {}
    flags: dict[int, tuple[bool, bool]] = {}
    with open(path, newline="") as f:
        for i, r in enumerate(csv.DictReader(f)):
            try:
                lv = int(r["level"])
                rows.setdefault(lv, []).append((int(r["index"]), BoxWH(float(r["w"]), float(r["h"]))))
                flags[lv] = (r.get("fallback") == "1", r.get("clamped") == "1")
            except (KeyError, TypeError, ValueError) as e:
                raise AnnotationError(f"{path}: row {i + 1}: {e}") from None
    if sorted(rows) != list(range(len(rows))) or not rows:
        raise AnnotationError(f"{path}: levels must be numbered 0..l-1, got {sorted(rows)}")
    s = scale_thresholds(len(rows)) if len(rows) >= 2 else [0.0, 1.0]
    levels = [LevelAnchors(lv, s[lv], s[lv + 1], [b for _, b in sorted(rows[lv], key=lambda t: t[0])], 0, *flags[lv])
              for lv in sorted(rows)]
    return AnchorSet(levels)


def fallback_anchors(lower: float, upper: float, k: int) -> list[BoxWH]:
    """k square priors with scales evenly spaced inside [lower, upper)."""
    return [BoxWH(s, s) for s in (lower + (j + 0.5) * (upper - lower) / k for j in range(k))]


def _clamp_to_bin(a: BoxWH, lower: float, upper: float, top: bool, rule: str) -> tuple[BoxWH, bool]:
    s = float(box_scale(a.w, a.h, rule))
    inside = lower <= s <= upper if top else lower <= s < upper
    if inside:
        return a, False
    target = lower if s < lower else (upper if top else math.nextafter(upper, 0.0))
    f = target / s
    w, h = a.w * f, a.h * f
    # keep the product (hence the geometric scale) when one side would exceed 1
    if w > 1:
        w, h = 1.0, h * w
    if h > 1:
        w, h = w * h, 1.0
    return BoxWH(w, h), True


def default_anchor_set(levels: int, k: int) -> AnchorSet:
    """Fallback priors for every level; a single level spans the whole [0, 1] range."""
    s = [0.0, 1.0] if levels == 1 else scale_thresholds(levels)
    return AnchorSet([LevelAnchors(i, s[i], s[i + 1], fallback_anchors(s[i], s[i + 1], k), 0, fallback=True)
                      for i in range(levels)])


def generate_anchors(boxes: Sequence[BoxWH], levels: int = 5, k: int = 3, seed: int = 0, *,
                     scale_rule: str = "geometric", center: str = "mean") -> AnchorSet:
    """Bin by scale, then cluster each bin into k anchors.

    Bins with fewer than k boxes fall back to evenly spaced square priors.
    Cluster centres that leave their bin are pulled to the bin edge; both
    cases are flagged on the returned level.
    """
    sb = bin_by_scale(boxes, levels, scale_rule)
    out = []
    for i, members in enumerate(sb.bins):
        lo, hi = sb.thresholds[i], sb.thresholds[i + 1]
        top = i == levels - 1
        if len(members) < k:
            log.warning("level %d has %d boxes (< k=%d); using fallback anchors", i, len(members), k)
            out.append(LevelAnchors(i, lo, hi, fallback_anchors(lo, hi, k), len(members), fallback=True))
            continue
        res = kmeans_iou(members, k, seed=seed + i, center=center)
        anchors, clamped = [], False
        for a in res.anchors:
            a2, c = _clamp_to_bin(a, lo, hi, top, scale_rule)
            anchors.append(a2)
            clamped |= c
        if clamped:
            log.warning("level %d: anchors clamped to scale bin [%g, %g)", i, lo, hi)
        out.append(LevelAnchors(i, lo, hi, anchors, len(members), clamped=clamped, objective=res.objective))
    return AnchorSet(out, scale_rule)


def generate_anchors_from_file(path, levels: int = 5, k: int = 3, seed: int = 0, **kw) -> AnchorSet:
    return generate_anchors(load_boxes(path), levels, k, seed, **kw)
