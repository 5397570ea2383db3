"""Detection metrics: IoU, greedy NMS and all-point mAP@0.5."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class DetectionBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float = 1.0
    class_id: int = 0

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {(self.x_min, self.y_min, self.x_max, self.y_max)}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: DetectionBox, b: DetectionBox) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def nms(boxes: Sequence[DetectionBox], iou_threshold: float = 0.5) -> list[DetectionBox]:
    """Greedy per-class suppression; ties go to the lower class id, then input order."""
    if not 0 < iou_threshold < 1:
        raise ValueError(f"iou_threshold must lie in (0, 1), got {iou_threshold}")
    order = sorted(range(len(boxes)), key=lambda k: (-boxes[k].confidence, boxes[k].class_id, k))
    kept: list[DetectionBox] = []
    for k in order:
        b = boxes[k]
        if all(o.class_id != b.class_id or iou(o, b) <= iou_threshold for o in kept):
            kept.append(b)
    return kept


def _as_boxes(items, default_conf: float = 1.0) -> list[DetectionBox]:
    out = []
    for it in items:
        if isinstance(it, DetectionBox):
            out.append(it)
        elif len(it) == 5:
            x0, y0, x1, y1, c = it
            out.append(DetectionBox(x0, y0, x1, y1, default_conf, int(c)))
        else:
            x0, y0, x1, y1, conf, c = it
            out.append(DetectionBox(x0, y0, x1, y1, conf, int(c)))
    return out


def average_precision(recall: np.ndarray, precision: np.ndarray) -> float:
    """Area under the monotone precision envelope (all-point interpolation)."""
    r = np.concatenate([[0.0], recall, [1.0]])
    p = np.concatenate([[0.0], precision, [0.0]])
    p = np.maximum.accumulate(p[::-1])[::-1]
    steps = np.nonzero(r[1:] != r[:-1])[0]
    return float(np.sum((r[steps + 1] - r[steps]) * p[steps + 1]))


def map_at_50(predictions: Sequence[Iterable], ground_truth: Sequence[Iterable], threshold: float = 0.5) -> float:
    """mAP over classes that have at least one ground-truth box.

    ``predictions[k]`` and ``ground_truth[k]`` hold the boxes of image k, as
    :class:`DetectionBox` or tuples ``(x0, y0, x1, y1[, conf], class_id)``.
    Predictions are ranked by confidence (stable in image/input order); each
    is matched to the unmatched same-class ground truth with the highest IoU
    at or above ``threshold``.
    """
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} prediction lists for {len(ground_truth)} images")
    gts = [_as_boxes(g) for g in ground_truth]
    preds = [_as_boxes(p) for p in predictions]
    classes = sorted({b.class_id for g in gts for b in g})
    if not classes:
        raise ValueError("mAP is undefined without ground-truth boxes")
    aps = []
    for c in classes:
        n_gt = sum(b.class_id == c for g in gts for b in g)
        ranked = [(p.confidence, img, k, p) for img, ps in enumerate(preds) for k, p in enumerate(ps) if p.class_id == c]
        ranked.sort(key=lambda e: -e[0])
        used = [[False] * len(g) for g in gts]
        tp = np.zeros(len(ranked))
        for r, (_, img, _, p) in enumerate(ranked):
            best, best_j = -1.0, -1
            for j, g in enumerate(gts[img]):
                if g.class_id != c or used[img][j]:
                    continue
                v = iou(p, g)
                if v >= threshold and v > best:
                    best, best_j = v, j
            if best_j >= 0:
                used[img][best_j] = True
                tp[r] = 1
        aps.append(_exact_ap(tp, n_gt))
    return float(sum(aps, Fraction(0)) / len(aps))


def _exact_ap(tp: np.ndarray, n_gt: int) -> Fraction:
    """All-point AP from ranked TP flags in rational arithmetic.

    Recall rises by 1/n_gt at each TP, so the area is the sum over TP ranks of
    the best precision at that rank or later, divided by n_gt.
    """
    ctp = np.cumsum(tp, dtype=np.int64)
    envelope, total = Fraction(0), Fraction(0)
    for r in range(len(tp) - 1, -1, -1):
        envelope = max(envelope, Fraction(int(ctp[r]), r + 1))
        if tp[r]:
            total += envelope
    return total / n_gt


def detections_from_output(
    raw: np.ndarray, grid: int, conf_threshold: float = 0.05, iou_threshold: float = 0.5, top_k: int = 50
) -> list[list[DetectionBox]]:
    """Decode N×S×S×(5+K) head output into per-image NMS-filtered boxes.

    Confidence is sigmoid(objectness) times the best class probability.
    """
    from .network import decode_boxes

    raw = np.asarray(raw, dtype=np.float64)
    geo = decode_boxes(raw, grid)
    obj = 1 / (1 + np.exp(-raw[..., 4]))
    logits = raw[..., 5:]
    probs = np.exp(logits - logits.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    cls = probs.argmax(axis=-1)
    conf = obj * probs.max(axis=-1)
    out = []
    for k in range(raw.shape[0]):
        cand = []
        for row, col in zip(*np.nonzero(conf[k] >= conf_threshold)):
            cx, cy, w, h = geo[k, row, col]
            x0, y0 = max(cx - w / 2, 0.0), max(cy - h / 2, 0.0)
            x1, y1 = min(cx + w / 2, 1.0), min(cy + h / 2, 1.0)
            if x1 > x0 and y1 > y0:
                cand.append(DetectionBox(x0, y0, x1, y1, float(conf[k, row, col]), int(cls[k, row, col])))
        cand.sort(key=lambda b: -b.confidence)
        out.append(nms(cand[:top_k], iou_threshold))
    return out
