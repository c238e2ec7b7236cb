"""Box conventions, (G)IoU, and the log-domain Gaussian spatial weight map.

Boxes are normalized to the image extent. ``cxcywh`` is the prediction
parameterization; ``xyxy`` corner form is used for overlap arithmetic.

The spatial prior of a query is rasterized directly as ``log G``:

    log G(i, j) = -(i - c_w)^2 / (beta * s_w^2) - (j - c_h)^2 / (beta * s_h^2)

at integer cell indices ``i in 0..W-1``, ``j in 0..H-1``. ``G`` itself is never
materialized, so far cells never underflow to ``-inf``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, apply, broadcast_to, concat, maximum, minimum, relu

SCALE_FLOOR = 1e-2


# boxes -------------------------------------------------------------------


def cxcywh_to_xyxy(boxes):
    """Center-size to corner form. Accepts numpy arrays or tensors [..., 4]."""
    if isinstance(boxes, Tensor):
        cx, cy, w, h = (boxes[..., k : k + 1] for k in range(4))
        return concat([cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5], axis=-1)
    b = np.asarray(boxes, dtype=np.float64)
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) * 0.5, (y1 + y2) * 0.5, x2 - x1, y2 - y1], axis=-1)


def _check_corners(b: np.ndarray) -> None:
    if np.any(b[..., 2] < b[..., 0]) or np.any(b[..., 3] < b[..., 1]):
        raise ValueError("inverted box: expected x2 >= x1 and y2 >= y1")


def _area(b):
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def giou(a, b):
    """Generalized IoU of corner boxes, elementwise over matching leading shapes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_corners(a)
    _check_corners(b)
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0.0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0.0, None)
    inter = iw * ih
    union = _area(a) + _area(b) - inter
    enclose = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    iou = inter / np.maximum(union, 1e-12)
    out = iou - (enclose - union) / np.maximum(enclose, 1e-12)
    return float(out) if out.ndim == 0 else out


def pairwise_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU matrix [len(a), len(b)] of corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a)[:, None] + _area(b)[None, :] - inter
    return inter / np.maximum(union, 1e-12)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    return giou(a[:, None, :].repeat(len(b), axis=1), b[None, :, :].repeat(len(a), axis=0))


def giou_tensor(a: Tensor, b: np.ndarray) -> Tensor:
    """Differentiable GIoU between predicted corner boxes ``a`` and fixed targets ``b`` ([M, 4])."""
    bt = Tensor(b)
    ax1, ay1, ax2, ay2 = (a[:, k] for k in range(4))
    bx1, by1, bx2, by2 = (bt[:, k] for k in range(4))
    iw = relu(minimum(ax2, bx2) - maximum(ax1, bx1))
    ih = relu(minimum(ay2, by2) - maximum(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    enclose = (maximum(ax2, bx2) - minimum(ax1, bx1)) * (maximum(ay2, by2) - minimum(ay1, by1))
    return inter / union - (enclose - union) / enclose


# spatial prior -------------------------------------------------------------


@dataclass
class SpatialPrior:
    """Per-query spatial prior in normalized image coordinates.

    center: [N, 2] shared (c_w, c_h) in (0, 1)
    offsets: [N, P, 2] per-head center offsets (P = 1 for head-shared)
    scales: [N, P, 2] per-head (s_w, s_h) as fractions of the image extent
    """

    center: Tensor
    offsets: Tensor
    scales: Tensor
    beta: float = 1.0
    center_logit: Tensor | None = None  # pre-sigmoid center, when predicted

    @property
    def num_heads(self) -> int:
        return self.offsets.shape[1]

    def head_centers(self) -> Tensor:
        n, p, _ = self.offsets.shape
        return broadcast_to(self.center.reshape(n, 1, 2), (n, p, 2)) + self.offsets


def log_gaussian_map(center, scales, grid: tuple[int, int], beta: float = 1.0) -> Tensor:
    """Log of the Gaussian-like weight map on a ``W x H`` grid of integer cells.

    center: (c_w, c_h) in grid units, shape [..., 2]
    scales: (s_w, s_h) in grid units, shape [..., 2]
    Returns [..., H, W]; entry [j, i] is the log weight of cell (i, j).
    """
    width, height = grid
    if width < 1 or height < 1:
        raise ValueError(f"grid must be at least 1x1, got {grid}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    center = center if isinstance(center, Tensor) else Tensor(center)
    scales = scales if isinstance(scales, Tensor) else Tensor(scales)
    if center.shape != scales.shape or center.shape[-1] != 2:
        raise ValueError(f"center {center.shape} and scales {scales.shape} must both be [..., 2]")
    if np.any(scales.data <= 0):
        raise ValueError("scales must be positive")

    cw, ch = center.data[..., 0:1], center.data[..., 1:2]
    sw, sh = scales.data[..., 0:1], scales.data[..., 1:2]
    dx = np.arange(width, dtype=np.float64) - cw  # [..., W]
    dy = np.arange(height, dtype=np.float64) - ch  # [..., H]
    kx = 1.0 / (beta * sw * sw)
    ky = 1.0 / (beta * sh * sh)
    log_x = -dx * dx * kx
    log_y = -dy * dy * ky
    out = log_y[..., :, None] + log_x[..., None, :]

    def fn(g):
        gx = g.sum(axis=-2)
        gy = g.sum(axis=-1)
        g_cw = (gx * 2.0 * dx * kx).sum(axis=-1)
        g_ch = (gy * 2.0 * dy * ky).sum(axis=-1)
        g_sw = (gx * 2.0 * dx * dx * kx / sw).sum(axis=-1)
        g_sh = (gy * 2.0 * dy * dy * ky / sh).sum(axis=-1)
        return np.stack([g_cw, g_ch], axis=-1), np.stack([g_sw, g_sh], axis=-1)

    return apply(out, (center, scales), fn)


def rasterize_prior(prior: SpatialPrior, grid: tuple[int, int]) -> Tensor:
    """Rasterize every head of ``prior`` onto a ``W x H`` grid.

    Normalized centers map to grid units by ``c * W`` (resp. ``c * H``); scales
    likewise. Returns [N, P, H, W].
    """
    width, height = grid
    to_grid = np.broadcast_to(np.array([width, height], dtype=np.float64), prior.scales.shape).copy()
    centers = prior.head_centers() * to_grid
    scales = prior.scales * to_grid
    return log_gaussian_map(centers, scales, grid, prior.beta)
