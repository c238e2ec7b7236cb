"""Scikit-learn style estimator around training and inference."""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .config import SceneConfig, TrainConfig
from .data import Dataset
from .evaluate import EvalResult, detections_from_logits, evaluate_detections
from .matching import GroundTruth
from .train import train


def check_images(X) -> np.ndarray:
    """Validate a stack of square RGB images shaped [n, 3, S, S]."""
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_min_samples=1)
    if X.ndim != 4 or X.shape[1] != 3 or X.shape[2] != X.shape[3]:
        raise ValueError(f"expected images shaped [n, 3, S, S], got {X.shape}")
    return X


def check_targets(y, n: int, num_classes: int | None = None) -> list[GroundTruth]:
    """Accept GroundTruth objects or (labels, boxes) pairs, one per image."""
    targets = [t if isinstance(t, GroundTruth) else GroundTruth(*t) for t in y]
    if len(targets) != n:
        raise ValueError(f"{n} images but {len(targets)} targets")
    for t in targets:
        if len(t) and (t.labels.min() < 0 or (num_classes is not None and t.labels.max() >= num_classes)):
            raise ValueError(f"class ids must lie in [0, {num_classes})")
    return targets


class SMCADetector(BaseEstimator):
    """Set-prediction detector with spatially modulated co-attention.

    ``fit`` trains from scratch on images [n, 3, S, S] and per-image targets;
    ``predict`` returns per-image detections with scores at or above
    ``score_threshold``; ``score`` is AP at IoU 0.5.

    Examples
    --------
    >>> from smca.data import make_split
    >>> from smca.config import SceneConfig
    >>> data = make_split(0, 8, SceneConfig(), stream=1)
    >>> det = SMCADetector(epochs=1).fit(np.stack(data.images), data.targets)
    >>> len(det.predict(np.stack(data.images[:2])))
    2
    """

    def __init__(
        self,
        modulation="shared",
        encoder="2Intra-Multi-2Intra",
        scales=(4, 8, 16),
        dim=32,
        heads=4,
        ffn_dim=64,
        num_queries=12,
        decoder_depth=3,
        num_classes=3,
        epochs=30,
        lr=1e-3,
        lr_backbone=1e-4,
        weight_decay=1e-4,
        accumulate=8,
        beta=1.0,
        jitter=4,
        score_threshold=0.05,
        random_state=0,
    ):
        self.modulation = modulation
        self.encoder = encoder
        self.scales = scales
        self.dim = dim
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.num_queries = num_queries
        self.decoder_depth = decoder_depth
        self.num_classes = num_classes
        self.epochs = epochs
        self.lr = lr
        self.lr_backbone = lr_backbone
        self.weight_decay = weight_decay
        self.accumulate = accumulate
        self.beta = beta
        self.jitter = jitter
        self.score_threshold = score_threshold
        self.random_state = random_state

    def _config(self, image_size: int, max_objects: int) -> TrainConfig:
        scene = SceneConfig(
            image_size=image_size,
            num_classes=self.num_classes,
            max_objects=max(max_objects, 1),
            max_side=image_size // 2,
        )
        return TrainConfig(
            seed=int(self.random_state),
            epochs=self.epochs,
            lr=self.lr,
            lr_backbone=self.lr_backbone,
            weight_decay=self.weight_decay,
            accumulate=self.accumulate,
            beta=self.beta,
            dim=self.dim,
            heads=self.heads,
            ffn_dim=self.ffn_dim,
            num_queries=self.num_queries,
            decoder_depth=self.decoder_depth,
            encoder=self.encoder,
            modulation=self.modulation,
            scales=tuple(self.scales),
            jitter=self.jitter,
            scene=scene,
        )

    def fit(self, X, y):
        X = check_images(X)
        targets = check_targets(y, len(X), self.num_classes)
        cfg = self._config(X.shape[-1], max(len(t) for t in targets))
        cfg = dataclasses.replace(cfg, train_scenes=len(X), val_scenes=0)
        empty = Dataset([], [])
        self.model_, self.log_ = train(cfg, data=(Dataset(X, targets), empty), eval_every=0)
        self.config_ = cfg
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _raw(self, X) -> list[dict]:
        check_is_fitted(self, "model_")
        X = check_images(X)
        if X.shape[-1] != self.config_.scene.image_size:
            raise ValueError(f"fitted on {self.config_.scene.image_size} px images, got {X.shape[-1]} px")
        return [self.model_.predict(image) for image in X]

    def predict(self, X) -> list[dict]:
        """Per image: ``scores``, ``labels`` and cxcywh ``boxes`` above the score threshold."""
        out = []
        for raw in self._raw(X):
            dets = detections_from_logits(raw["logits"], raw["boxes"])
            keep = dets.scores >= self.score_threshold
            order = np.argsort(-dets.scores[keep], kind="stable")
            out.append(
                {
                    "scores": dets.scores[keep][order],
                    "labels": dets.labels[keep][order],
                    "boxes": dets.boxes[keep][order],
                }
            )
        return out

    def evaluate(self, X, y) -> EvalResult:
        raws = self._raw(X)
        targets = check_targets(y, len(raws), self.num_classes)
        dets = [detections_from_logits(r["logits"], r["boxes"]) for r in raws]
        return evaluate_detections(dets, targets, self.num_classes)

    def score(self, X, y) -> float:
        return self.evaluate(X, y).ap50
