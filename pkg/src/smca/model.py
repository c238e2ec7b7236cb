"""Backbone, full detector assembly, and forward passes."""
from __future__ import annotations

import math

import numpy as np

from .config import ConfigError, TrainConfig
from .decoder import Decoder, DetectionSet, decode
from .encoder import Encoder, MultiScaleFeatures, parse_arrangement, sinusoidal_pos_embedding
from .nn import Linear, Module
from .tensor import Tensor, conv2d, no_grad, parameter, relu

BACKBONE_STRIDES = (4, 8, 16)


class MiniBackbone(Module):
    """Four 3x3 stride-2 convolutions giving maps at strides 2, 4, 8, 16.

    The stride 4/8/16 maps are each projected to the model width by a 1x1
    projection (applied as a linear map over flattened cells).
    """

    def __init__(self, channels: tuple, dim: int, scales: tuple, rng: np.random.Generator):
        if len(channels) != 4:
            raise ConfigError("backbone needs four channel widths")
        c_in = 3
        self.convs = []
        self.biases = []
        for c_out in channels:
            fan_in = c_in * 9
            self.convs.append(parameter(rng.normal(scale=math.sqrt(2.0 / fan_in), size=(c_out, c_in, 3, 3))))
            self.biases.append(parameter(np.zeros(c_out)))
            c_in = c_out
        self.scales = tuple(scales)
        self.proj = [Linear(channels[1 + BACKBONE_STRIDES.index(s)], dim, rng) for s in self.scales]

    def __call__(self, image: Tensor) -> list[tuple[int, int, int, Tensor]]:
        return mini_backbone(image, self)


def mini_backbone(image: Tensor, params: MiniBackbone) -> list[tuple[int, int, int, Tensor]]:
    """Returns (stride, height, width, features [H*W, dim]) for each configured scale."""
    size = image.shape[-1]
    if size % max(params.scales) or image.shape[-2] % max(params.scales):
        raise ConfigError(f"image side {size} not divisible by stride {max(params.scales)}")
    x = image
    maps = {}
    for k, (w, b) in enumerate(zip(params.convs, params.biases)):
        x = relu(conv2d(x, w, b, stride=2, padding=1))
        maps[2 ** (k + 1)] = x
    out = []
    for stride, proj in zip(params.scales, params.proj):
        m = maps[stride]
        c, h, w = m.shape
        flat = m.reshape(c, h * w).transpose(1, 0)
        out.append((stride, h, w, proj(flat)))
    return out


class SMCAModel(Module):
    """Backbone, multi-scale encoder, modulated decoder and prediction heads."""

    def __init__(self, cfg: TrainConfig, seed: int | None = None):
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        self.cfg = cfg
        scales = tuple(cfg.scales)
        self.backbone = MiniBackbone(tuple(cfg.backbone_channels), cfg.dim, scales, rng)
        self.encoder = Encoder(cfg.dim, cfg.heads, cfg.ffn_dim, parse_arrangement(cfg.encoder), len(scales), rng)
        self.decoder = Decoder(
            cfg.dim,
            cfg.heads,
            cfg.ffn_dim,
            cfg.decoder_depth,
            cfg.num_queries,
            len(scales),
            cfg.scene.num_classes,
            cfg.modulation,
            rng,
            scale_init=cfg.scale_init,
        )
        self._pos_cache: dict = {}

    def backbone_parameters(self) -> list[Tensor]:
        return self.backbone.parameters()

    def positional(self, stride: int, h: int, w: int) -> Tensor:
        key = (stride, h, w)
        if key not in self._pos_cache:
            # cells placed in image-normalized units so scales share one frame
            step = 2 * math.pi * stride / self.cfg.scene.image_size
            self._pos_cache[key] = Tensor(sinusoidal_pos_embedding(h, w, self.cfg.dim, step=step))
        return self._pos_cache[key]

    def features(self, image) -> MultiScaleFeatures:
        image = image if isinstance(image, Tensor) else Tensor(image)
        levels = mini_backbone(image, self.backbone)
        return MultiScaleFeatures(
            rates=[s for s, _, _, _ in levels],
            sizes=[(h, w) for _, h, w, _ in levels],
            features=[f for _, _, _, f in levels],
            pos=[self.positional(s, h, w) for s, h, w, _ in levels],
        )

    def forward(self, image, traces: list | None = None) -> DetectionSet:
        encoded = self.encoder(self.features(image))
        return decode(encoded, self.decoder, self.cfg.beta, traces, self.cfg.box_reference)

    __call__ = forward

    def predict(self, image) -> dict:
        """Final-layer detections of one image as numpy arrays (no tape)."""
        with no_grad():
            dets = self.forward(image)
        logits, boxes = dets.final()
        return {"logits": logits.data.copy(), "boxes": boxes.data.copy()}
