"""Synthetic detection scenes: solid axis-aligned rectangles on a noisy background."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ConfigError, SceneConfig
from .matching import GroundTruth

# per-class RGB colors; classes beyond the palette reuse it cyclically
PALETTE = np.array(
    [
        [0.9, 0.15, 0.15],
        [0.15, 0.85, 0.2],
        [0.2, 0.3, 0.95],
        [0.95, 0.85, 0.1],
        [0.8, 0.2, 0.85],
        [0.1, 0.85, 0.85],
    ]
)
BACKGROUND = 0.35
_MASK64 = (1 << 64) - 1
_PLACEMENT_TRIES = 200


def splitmix64(x: int) -> int:
    """One step of the splitmix64 mixer."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def derive_seed(master: int, index: int, stream: int = 0) -> int:
    """Independent per-item seed, so results never depend on processing order."""
    return splitmix64(splitmix64(splitmix64(master & _MASK64) ^ (stream & _MASK64)) ^ (index & _MASK64))


def class_color(label: int) -> np.ndarray:
    return PALETTE[label % len(PALETTE)]


def generate_scene(seed: int, cfg: SceneConfig) -> tuple[np.ndarray, GroundTruth]:
    """Render one scene. Returns (image [3, S, S], ground truth in normalized cxcywh).

    Rectangles never overlap, so each box exactly bounds its rendered pixels.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    size = cfg.image_size
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    occupied = np.zeros((size, size), dtype=bool)
    image = np.full((3, size, size), BACKGROUND)
    labels, boxes = [], []
    for _ in range(count):
        for _ in range(_PLACEMENT_TRIES):
            w = int(rng.integers(cfg.min_side, cfg.max_side + 1))
            h = int(rng.integers(cfg.min_side, cfg.max_side + 1))
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            # one-pixel margin keeps neighbouring rectangles visually separate
            if not occupied[max(y0 - 1, 0) : y0 + h + 1, max(x0 - 1, 0) : x0 + w + 1].any():
                break
        else:
            raise ConfigError("could not place a non-overlapping object; lower max_objects or max_side")
        label = int(rng.integers(cfg.num_classes))
        occupied[y0 : y0 + h, x0 : x0 + w] = True
        image[:, y0 : y0 + h, x0 : x0 + w] = class_color(label)[:, None, None]
        labels.append(label)
        boxes.append([(x0 + w / 2) / size, (y0 + h / 2) / size, w / size, h / size])
    if cfg.noise > 0:
        image = image + rng.normal(scale=cfg.noise, size=image.shape)
    return image, GroundTruth(np.array(labels, dtype=np.int64), np.array(boxes).reshape(-1, 4))


def jitter_scene(image: np.ndarray, gt: GroundTruth, rng: np.random.Generator, max_shift: int, noise: float = 0.0):
    """Translate a scene by up to ``max_shift`` pixels without pushing any object out of frame."""
    if max_shift <= 0:
        return image, gt
    size = image.shape[-1]
    if len(gt):
        x1 = (gt.boxes[:, 0] - gt.boxes[:, 2] / 2) * size
        y1 = (gt.boxes[:, 1] - gt.boxes[:, 3] / 2) * size
        x2 = (gt.boxes[:, 0] + gt.boxes[:, 2] / 2) * size
        y2 = (gt.boxes[:, 1] + gt.boxes[:, 3] / 2) * size
        lo_x, hi_x = -int(np.floor(x1.min() + 1e-9)), int(np.floor(size - x2.max() + 1e-9))
        lo_y, hi_y = -int(np.floor(y1.min() + 1e-9)), int(np.floor(size - y2.max() + 1e-9))
    else:
        lo_x = lo_y = -max_shift
        hi_x = hi_y = max_shift
    dx = int(rng.integers(max(lo_x, -max_shift), min(hi_x, max_shift) + 1))
    dy = int(rng.integers(max(lo_y, -max_shift), min(hi_y, max_shift) + 1))
    out = np.full_like(image, BACKGROUND)
    if noise > 0:
        out += rng.normal(scale=noise, size=image.shape)
    src_x = slice(max(0, -dx), size - max(0, dx))
    dst_x = slice(max(0, dx), size - max(0, -dx))
    src_y = slice(max(0, -dy), size - max(0, dy))
    dst_y = slice(max(0, dy), size - max(0, -dy))
    out[:, dst_y, dst_x] = image[:, src_y, src_x]
    boxes = gt.boxes.copy()
    boxes[:, 0] += dx / size
    boxes[:, 1] += dy / size
    return out, GroundTruth(gt.labels.copy(), boxes)


@dataclass
class Dataset:
    images: np.ndarray  # [n, 3, S, S]
    targets: list

    def __len__(self) -> int:
        return len(self.targets)


def make_split(master_seed: int, count: int, cfg: SceneConfig, stream: int) -> Dataset:
    """``count`` scenes whose seeds are derived from (master seed, stream, index)."""
    scenes = [generate_scene(derive_seed(master_seed, i, stream), cfg) for i in range(count)]
    images = np.stack([s[0] for s in scenes]) if scenes else np.zeros((0, 3, cfg.image_size, cfg.image_size))
    return Dataset(images=images, targets=[s[1] for s in scenes])


TRAIN_STREAM = 1
VAL_STREAM = 2
