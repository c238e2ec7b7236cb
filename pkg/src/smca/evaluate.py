"""Average precision for box detections (101-point interpolated, per class, then averaged)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .geometry import cxcywh_to_xyxy, pairwise_iou

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class EvalResult:
    ap50: float
    ap75: float
    map: float
    ap_small: float
    ap_medium: float
    ap_large: float

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class Detections:
    """Detections of one image: scores [M], labels [M], boxes [M, 4] normalized cxcywh."""

    scores: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray


def detections_from_logits(logits: np.ndarray, boxes: np.ndarray) -> Detections:
    """Every (query, class) pair becomes a candidate scored by its sigmoid probability."""
    n, k = logits.shape
    probs = 1.0 / (1.0 + np.exp(-logits))
    return Detections(
        scores=probs.reshape(-1),
        labels=np.tile(np.arange(k), n),
        boxes=np.repeat(boxes, k, axis=0),
    )


def interpolated_ap(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP of a score-sorted true-positive sequence."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    tps = np.cumsum(tp)
    fps = np.cumsum(1 - tp)
    recall = tps / num_gt
    precision = tps / np.maximum(tps + fps, np.finfo(float).eps)
    # precision envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _match_class(dets, gts, cls, thr, area_range):
    """Greedy score-ordered matching for one class at one IoU threshold.

    Returns (tp flags of kept detections in score order, number of non-ignored GT).
    Ground truths outside ``area_range`` are ignored, as are unmatched
    detections whose own area falls outside it.
    """
    records = []  # (score, image, det index)
    num_gt = 0
    per_image = []
    for img, (d, g) in enumerate(zip(dets, gts)):
        dm = d.labels == cls
        gm = g.labels == cls
        d_boxes = cxcywh_to_xyxy(d.boxes[dm])
        g_boxes = cxcywh_to_xyxy(g.boxes[gm])
        g_area = g.boxes[gm, 2] * g.boxes[gm, 3]
        d_area = d.boxes[dm, 2] * d.boxes[dm, 3]
        g_ignore = ~((g_area >= area_range[0]) & (g_area < area_range[1]))
        d_out = ~((d_area >= area_range[0]) & (d_area < area_range[1]))
        num_gt += int((~g_ignore).sum())
        ious = pairwise_iou(d_boxes, g_boxes) if len(d_boxes) and len(g_boxes) else np.zeros((len(d_boxes), len(g_boxes)))
        per_image.append((ious, g_ignore, d_out))
        for k, s in enumerate(d.scores[dm]):
            records.append((-s, img, k))
    # stable order: equal scores keep their original position
    records.sort(key=lambda r: r[0])
    taken = [np.zeros(len(p[1]), dtype=bool) for p in per_image]
    flags = []
    for _, img, k in records:
        ious, g_ignore, d_out = per_image[img]
        best, best_ignored = -1, False
        for want_ignored in (False, True):
            best_iou = thr
            for gi in range(ious.shape[1]):
                if taken[img][gi] or g_ignore[gi] != want_ignored:
                    continue
                if ious[k, gi] >= best_iou:
                    best, best_iou, best_ignored = gi, ious[k, gi], want_ignored
            if best >= 0:
                break
        if best >= 0:
            taken[img][best] = True
            if not best_ignored:
                flags.append(1)
        elif not d_out[k]:
            flags.append(0)
    return np.array(flags, dtype=np.int64), num_gt


def average_precision(dets, gts, num_classes: int, thr: float, area_range=(0.0, np.inf)) -> float:
    """Mean over classes (with at least one ground truth) of interpolated AP."""
    aps = []
    for cls in range(num_classes):
        tp, num_gt = _match_class(dets, gts, cls, thr, area_range)
        if num_gt:
            aps.append(interpolated_ap(tp, num_gt))
    return float(np.mean(aps)) if aps else 0.0


def size_terciles(gts) -> tuple[float, float]:
    areas = np.concatenate([g.boxes[:, 2] * g.boxes[:, 3] for g in gts]) if gts else np.zeros(0)
    if len(areas) == 0:
        return 0.0, 0.0
    lo, hi = np.quantile(areas, [1 / 3, 2 / 3])
    return float(lo), float(hi)


def evaluate_detections(dets, gts, num_classes: int) -> EvalResult:
    aps = [average_precision(dets, gts, num_classes, t) for t in IOU_THRESHOLDS]
    lo, hi = size_terciles(gts)
    ranges = [(0.0, lo), (lo, hi), (hi, np.inf)]
    by_size = [np.mean([average_precision(dets, gts, num_classes, t, r) for t in IOU_THRESHOLDS]) for r in ranges]
    return EvalResult(
        ap50=aps[0],
        ap75=aps[5],
        map=float(np.mean(aps)),
        ap_small=float(by_size[0]),
        ap_medium=float(by_size[1]),
        ap_large=float(by_size[2]),
    )


def evaluate(model, dataset) -> EvalResult:
    """Run ``model`` over every image of ``dataset`` and score its final-layer output."""
    num_classes = model.cfg.scene.num_classes
    if any(len(g) and g.labels.max() >= num_classes for g in dataset.targets):
        raise ValueError("dataset has class ids beyond the model's class count")
    dets = []
    for image in dataset.images:
        out = model.predict(image)
        dets.append(detections_from_logits(out["logits"], out["boxes"]))
    return evaluate_detections(dets, dataset.targets, num_classes)
