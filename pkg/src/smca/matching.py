"""Bipartite matching of predictions to ground truth, and the set-prediction loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .decoder import DetectionSet
from .geometry import cxcywh_to_xyxy, giou_tensor, pairwise_giou
from .tensor import Tensor, concat, sigmoid, softplus

CLS_WEIGHT = 2.0
L1_WEIGHT = 5.0
GIOU_WEIGHT = 2.0
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class GroundTruth:
    """Objects of one image: integer class ids and normalized cxcywh boxes."""

    labels: np.ndarray
    boxes: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        if len(self.labels) != len(self.boxes):
            raise ValueError("labels and boxes differ in length")
        if np.any(self.boxes[:, 2:] < 0) or not np.isfinite(self.boxes).all():
            raise ValueError("boxes must be finite with non-negative size")

    def __len__(self) -> int:
        return len(self.labels)

    def permuted(self, order) -> "GroundTruth":
        order = np.asarray(order)
        return GroundTruth(self.labels[order], self.boxes[order])


@dataclass
class Assignment:
    """Ground-truth index ``t`` is assigned query ``query_of[t]``."""

    query_of: np.ndarray
    total_cost: float

    def pairs(self) -> list[tuple[int, int]]:
        return [(t, int(q)) for t, q in enumerate(self.query_of)]


@dataclass
class LossBreakdown:
    cls: float
    l1: float
    giou: float
    total: Tensor
    terms: Tensor | None = None
    per_layer: list = field(default_factory=list)

    def as_row(self) -> dict:
        return {"loss": float(self.total.data), "loss_cls": self.cls, "loss_l1": self.l1, "loss_giou": self.giou}


# focal loss ----------------------------------------------------------------


def focal_loss(logit: float, target: float, alpha: float | None = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """Sigmoid focal loss of one logit. ``alpha=None`` disables class balancing."""
    p = 1.0 / (1.0 + math.exp(-logit)) if logit >= 0 else math.exp(logit) / (1.0 + math.exp(logit))
    # log(1 + e^x) - t*x, stable for either sign of x
    ce = max(logit, 0.0) + math.log1p(math.exp(-abs(logit))) - target * logit
    p_t = p * target + (1.0 - p) * (1.0 - target)
    loss = ce * (1.0 - p_t) ** gamma
    if alpha is not None:
        loss *= alpha * target + (1.0 - alpha) * (1.0 - target)
    return loss


def focal_terms(logits: Tensor, targets: np.ndarray, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> Tensor:
    """Elementwise focal loss of ``logits`` against 0/1 ``targets`` (same shape)."""
    t = np.asarray(targets, dtype=np.float64)
    p = sigmoid(logits)
    ce = softplus(logits) - logits * t
    one_minus_pt = p * (1.0 - 2.0 * t) + t  # 1 - p_t
    loss = ce * one_minus_pt**gamma if gamma != 0 else ce
    if alpha is not None:
        loss = loss * (alpha * t + (1.0 - alpha) * (1.0 - t))
    return loss


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA) -> Tensor:
    """Summed focal loss over every entry of ``logits``."""
    return focal_terms(logits, targets, alpha, gamma).sum()


# matching -------------------------------------------------------------------


def matching_cost(
    logits: np.ndarray,
    boxes: np.ndarray,
    gt: GroundTruth,
    cls_cost: str = "focal",
    alpha: float = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> np.ndarray:
    """Cost matrix [num_gt, N] = 2*cls + 5*L1(cxcywh) + 2*(1 - GIoU)."""
    logits = np.asarray(logits, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    n = len(boxes)
    if len(gt) == 0:
        return np.zeros((0, n))
    prob = 1.0 / (1.0 + np.exp(-logits[:, gt.labels]))  # [N, T]
    if cls_cost == "focal":
        eps = 1e-12
        pos = alpha * (1 - prob) ** gamma * -np.log(prob + eps)
        neg = (1 - alpha) * prob**gamma * -np.log(1 - prob + eps)
        c_cls = (pos - neg).T
    elif cls_cost == "neg_prob":
        c_cls = -prob.T
    else:
        raise ValueError(f"unknown classification cost {cls_cost!r}")
    c_l1 = np.abs(gt.boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    c_giou = 1.0 - pairwise_giou(cxcywh_to_xyxy(gt.boxes), cxcywh_to_xyxy(boxes))
    return CLS_WEIGHT * c_cls + L1_WEIGHT * c_l1 + GIOU_WEIGHT * c_giou


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-cost injective assignment of rows to columns (rows <= columns).

    Shortest augmenting paths with row/column potentials, O(T^2 N).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    t, n = cost.shape
    if t > n:
        raise ValueError(f"more ground truths ({t}) than queries ({n})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    if t == 0:
        return Assignment(np.zeros(0, dtype=np.int64), 0.0)

    u = np.zeros(t + 1)
    v = np.zeros(n + 1)
    row_of = np.zeros(n + 1, dtype=np.int64)  # column j -> 1-based row, 0 = free
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, t + 1):
        row_of[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[row_of[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1

    query_of = np.zeros(t, dtype=np.int64)
    for j in range(1, n + 1):
        if row_of[j]:
            query_of[row_of[j] - 1] = j - 1
    total = 0.0
    for r in range(t):
        total += cost[r, query_of[r]]
    return Assignment(query_of, total)


# set loss -------------------------------------------------------------------


def _layer_terms(logits: Tensor, boxes: Tensor, gt: GroundTruth, cls_cost: str, alpha, gamma):
    """Weighted per-element loss terms of one layer: (cls, l1, giou, assignment)."""
    n, k = logits.shape
    match_alpha = FOCAL_ALPHA if alpha is None else alpha
    cost = matching_cost(logits.data, boxes.data, gt, cls_cost, match_alpha, gamma)
    assign = hungarian(cost)
    scale = 1.0 / max(len(gt), 1)
    targets = np.zeros((n, k))
    if len(gt):
        targets[assign.query_of, gt.labels] = 1.0
    cls = focal_terms(logits, targets, alpha, gamma).reshape(n * k) * (CLS_WEIGHT * scale)
    if len(gt) == 0:
        return cls, None, None, assign
    matched = boxes[assign.query_of]
    l1 = (matched - gt.boxes).abs().reshape(4 * len(gt)) * (L1_WEIGHT * scale)
    g = giou_tensor(cxcywh_to_xyxy(matched), cxcywh_to_xyxy(gt.boxes))
    giou = (1.0 - g) * (GIOU_WEIGHT * scale)
    return cls, l1, giou, assign


def set_loss(
    preds: DetectionSet,
    gt: GroundTruth,
    cls_cost: str = "focal",
    alpha: float | None = FOCAL_ALPHA,
    gamma: float = FOCAL_GAMMA,
) -> LossBreakdown:
    """Weighted focal + L1 + GIoU loss, matched and summed independently per decoder layer.

    Unweighted component values (normalized by the ground-truth count) are
    reported in ``cls``, ``l1`` and ``giou``; ``terms`` holds every weighted
    element and ``total`` is their sum.
    """
    pieces = []
    per_layer = []
    sums = [0.0, 0.0, 0.0]
    for logits, boxes in zip(preds.logits, preds.boxes):
        cls, l1, giou, assign = _layer_terms(logits, boxes, gt, cls_cost, alpha, gamma)
        vals = (
            float(cls.data.sum()) / CLS_WEIGHT,
            0.0 if l1 is None else float(l1.data.sum()) / L1_WEIGHT,
            0.0 if giou is None else float(giou.data.sum()) / GIOU_WEIGHT,
        )
        pieces.extend(t for t in (cls, l1, giou) if t is not None)
        per_layer.append({"cls": vals[0], "l1": vals[1], "giou": vals[2], "assignment": assign})
        sums = [a + b for a, b in zip(sums, vals)]
    terms = concat(pieces)
    return LossBreakdown(cls=sums[0], l1=sums[1], giou=sums[2], total=terms.sum(), terms=terms, per_layer=per_layer)
