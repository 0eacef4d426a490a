"""Head-output decoding and Gaussian soft-NMS.

Per-anchor channel layout of a head output is ``tx, ty, tw, th, obj,
cls_0 .. cls_{C-1}``, anchors stacked along the channel axis. Centres
follow the YOLO convention ``x = (col + sigmoid(tx)) / grid_w``; scores are
``sigmoid(obj) * sigmoid(cls)`` for the best class of each anchor.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Sequence

import numpy as np

from .anchors import BoxWH

MODES = ("exp", "additive")


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    w: float
    h: float
    class_id: int
    score: float
    clamped: bool = False

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")


class DecodedWH(NamedTuple):
    w: float
    h: float
    clamped: bool


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _decode_side(anchor, pred, mode):
    if mode == "exp":
        v = anchor * np.exp(pred)
    elif mode == "additive":
        v = anchor + pred
    else:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    clipped = np.clip(v, 0.0, 1.0)
    return clipped, clipped != v


def decode_wh(anchor: BoxWH, tw: float, th: float, mode: str = "additive") -> DecodedWH:
    """exp: w = w_a * e^tw; additive: w = w_a + tw. Results are clamped to [0, 1] and flagged."""
    w, cw = _decode_side(anchor.w, tw, mode)
    h, ch = _decode_side(anchor.h, th, mode)
    return DecodedWH(float(w), float(h), bool(cw or ch))


def _as_level(raw) -> np.ndarray:
    arr = np.asarray(getattr(raw, "data", raw), dtype=np.float64)
    if arr.ndim == 4:
        if arr.shape[0] != 1:
            raise ValueError(f"decode expects a single image, got batch {arr.shape[0]}")
        arr = arr[0]
    if arr.ndim != 3:
        raise ValueError(f"raw head output must be (C, H, W) or (1, C, H, W), got {arr.shape}")
    return arr


def infer_num_classes(channels: int, k: int) -> int:
    if k < 1 or channels % k or channels // k < 6:
        raise ValueError(f"{channels} channels cannot hold {k} anchors x (5 + classes)")
    return channels // k - 5


def decode_level(raw, anchors: Sequence[BoxWH], mode: str = "additive", score_thresh: float = 0.3,
                 num_classes: int | None = None) -> list[Detection]:
    arr = _as_level(raw)
    k = len(anchors)
    c, gh, gw = arr.shape
    nc = infer_num_classes(c, k) if num_classes is None else num_classes
    if c != k * (5 + nc):
        raise ValueError(f"raw output has {c} channels, layout needs {k} x (5 + {nc}) = {k * (5 + nc)}")
    a = arr.reshape(k, 5 + nc, gh, gw)
    cols = np.arange(gw)[None, None, :]
    rows = np.arange(gh)[None, :, None]
    x = (cols + _sigmoid(a[:, 0])) / gw
    y = (rows + _sigmoid(a[:, 1])) / gh
    aw = np.array([b.w for b in anchors])[:, None, None]
    ah = np.array([b.h for b in anchors])[:, None, None]
    w, cw = _decode_side(aw, a[:, 2], mode)
    h, ch = _decode_side(ah, a[:, 3], mode)
    obj = _sigmoid(a[:, 4])
    cls = _sigmoid(a[:, 5:])
    best = cls.argmax(axis=1)
    score = obj * np.take_along_axis(cls, best[:, None], axis=1)[:, 0]
    x, y = np.clip(x, 0.0, 1.0), np.clip(y, 0.0, 1.0)
    clamped = cw | ch
    out = []
    # row-major over (row, col, anchor)
    for r, cc, ai in zip(*np.nonzero((score >= score_thresh).transpose(1, 2, 0))):
        out.append(Detection(float(x[ai, r, cc]), float(y[ai, r, cc]), float(w[ai, r, cc]), float(h[ai, r, cc]),
                             int(best[ai, r, cc]), float(score[ai, r, cc]), bool(clamped[ai, r, cc])))
    return out


def decode_outputs(raws: Sequence, anchor_levels: Sequence[Sequence[BoxWH]], mode: str = "additive",
                   score_thresh: float = 0.3, num_classes: int | None = None) -> list[Detection]:
    if len(raws) != len(anchor_levels):
        raise ValueError(f"{len(raws)} head outputs but {len(anchor_levels)} anchor levels")
    dets = []
    for raw, anchors in zip(raws, anchor_levels):
        dets += decode_level(raw, anchors, mode, score_thresh, num_classes)
    return dets


# -- soft-NMS -----------------------------------------------------------------

def _corners(d):
    return d[..., 0] - d[..., 2] / 2, d[..., 1] - d[..., 3] / 2, d[..., 0] + d[..., 2] / 2, d[..., 1] + d[..., 3] / 2


def box_iou(a: Detection, b: Detection) -> float:
    ax0, ay0, ax1, ay1 = a.x - a.w / 2, a.y - a.h / 2, a.x + a.w / 2, a.y + a.h / 2
    bx0, by0, bx1, by1 = b.x - b.w / 2, b.y - b.h / 2, b.x + b.w / 2, b.y + b.h / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def soft_nms(dets: Sequence[Detection], sigma: float = 0.5, final_thresh: float = 0.001) -> list[Detection]:
    """Gaussian soft-NMS, per class.

    Repeatedly take the best remaining detection (score, then lower
    class_id, then smaller x) and decay same-class survivors by
    exp(-IoU^2 / sigma); anything under ``final_thresh`` is dropped.
    Returns detections in selection order with rescored scores.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if not dets:
        return []
    boxes = np.array([(d.x, d.y, d.w, d.h) for d in dets], dtype=np.float64)
    cls = np.array([d.class_id for d in dets])
    scores = np.array([d.score for d in dets], dtype=np.float64)
    x0, y0, x1, y1 = _corners(boxes)
    area = boxes[:, 2] * boxes[:, 3]
    alive = scores >= final_thresh
    out = []
    while alive.any():
        cand = np.flatnonzero(alive)
        # lexsort: last key is primary
        i = cand[np.lexsort((boxes[cand, 0], cls[cand], -scores[cand]))[0]]
        alive[i] = False
        out.append(replace(dets[i], score=float(scores[i])))
        peers = np.flatnonzero(alive & (cls == cls[i]))
        if len(peers):
            iw = np.clip(np.minimum(x1[peers], x1[i]) - np.maximum(x0[peers], x0[i]), 0.0, None)
            ih = np.clip(np.minimum(y1[peers], y1[i]) - np.maximum(y0[peers], y0[i]), 0.0, None)
            inter = iw * ih
            union = area[peers] + area[i] - inter
            iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
            scores[peers] *= np.exp(-(iou ** 2) / sigma)
            alive[peers] = scores[peers] >= final_thresh
    return out


# -- output formats -------------------------------------------------------------

def to_coco_results(dets: Sequence[Detection], image_id: int, image_w: float, image_h: float) -> list[dict]:
    """COCO results entries; bbox is [left, top, width, height] in pixels."""
    return [
        {
            "image_id": image_id,
            "category_id": d.class_id,
            "bbox": [round((d.x - d.w / 2) * image_w, 4), round((d.y - d.h / 2) * image_h, 4),
                     round(d.w * image_w, 4), round(d.h * image_h, 4)],
            "score": round(d.score, 6),
        }
        for d in dets
    ]


def format_detections(dets: Sequence[Detection]) -> str:
    lines = [f"{'#':>4}  {'class':>5}  {'score':>8}  {'x':>8}  {'y':>8}  {'w':>8}  {'h':>8}"]
    for i, d in enumerate(dets):
        flag = "  clamped" if d.clamped else ""
        lines.append(f"{i:>4}  {d.class_id:>5}  {d.score:>8.5f}  {d.x:>8.5f}  {d.y:>8.5f}  {d.w:>8.5f}  {d.h:>8.5f}{flag}")
    lines.append(f"{len(dets)} detections")
    return "\n".join(lines) + "\n"


__all__ = ["Detection", "DecodedWH", "MODES", "decode_wh", "decode_level", "decode_outputs", "soft_nms",
           "box_iou", "to_coco_results", "format_detections", "infer_num_classes"]
