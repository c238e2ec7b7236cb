"""Object-query decoder with spatially modulated multi-scale co-attention."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .attention import (
    AttentionParams,
    PriorHead,
    multi_scale_smca,
    multi_head_self_attention,
    predict_spatial_prior,
    scale_selection_weights,
)
from .encoder import MultiScaleFeatures
from .geometry import SpatialPrior, rasterize_prior
from .nn import MLP, FeedForward, LayerNorm, Linear, Module
from .tensor import Tensor, concat, sigmoid

MODULATION_OFF = "off"
MODULATION_SHARED = "shared"
MODULATION_MULTIHEAD = "multihead"
MODULATIONS = (MODULATION_OFF, MODULATION_SHARED, MODULATION_MULTIHEAD)

FOCAL_PRIOR_PROB = 0.01


@dataclass
class LayerTrace:
    """What one decoder layer attended to; filled only when tracing."""

    prior: SpatialPrior | None = None
    log_maps: list = field(default_factory=list)  # per scale, [N, P, H, W] or None
    attention: list = field(default_factory=list)  # per scale, [heads, N, L]
    alpha: np.ndarray | None = None


@dataclass
class DetectionSet:
    """Per decoder layer: class logits [N, K] and boxes [N, 4] in normalized cxcywh."""

    logits: list[Tensor]
    boxes: list[Tensor]

    @property
    def num_layers(self) -> int:
        return len(self.logits)

    def final(self) -> tuple[Tensor, Tensor]:
        return self.logits[-1], self.boxes[-1]


class DecoderLayer(Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        ffn_dim: int,
        num_scales: int,
        modulation: str,
        rng: np.random.Generator,
        scale_init: float = 0.0,
    ):
        if modulation not in MODULATIONS:
            raise ValueError(f"modulation must be one of {MODULATIONS}, got {modulation!r}")
        self.modulation = modulation
        self.self_attn = AttentionParams(dim, heads, rng)
        self.cross_attn = AttentionParams(dim, heads, rng, num_kv=num_scales)
        self.prior = None
        if modulation != MODULATION_OFF:
            prior_heads = 1 if modulation == MODULATION_SHARED else heads
            self.prior = PriorHead(dim, prior_heads, rng, scale_init=scale_init)
        self.scale_fc = Linear(dim, num_scales, rng).zero_() if num_scales > 1 else None
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.norm3 = LayerNorm(dim)

    def __call__(self, tgt, query_pos, encoded, beta=1.0, trace=None):
        return decoder_layer(tgt, query_pos, encoded, self, beta, trace)


def decoder_layer(
    tgt: Tensor,
    query_pos: Tensor,
    encoded: MultiScaleFeatures,
    layer: DecoderLayer,
    beta: float = 1.0,
    trace: LayerTrace | None = None,
) -> Tensor:
    """Query self-attention, spatial prior, modulated co-attention, feedforward.

    Every sublayer is followed by residual addition and LayerNorm. The
    predicted prior (None when unmodulated) is recorded on ``trace``.
    """
    n = tgt.shape[0]
    tgt = layer.norm1(tgt + multi_head_self_attention(tgt, query_pos, layer.self_attn))
    query = tgt + query_pos

    log_maps: list = [None] * encoded.num_scales
    prior = None
    if layer.prior is not None:
        prior = predict_spatial_prior(query, layer.prior, beta)
        log_maps = [rasterize_prior(prior, (w, h)) for h, w in encoded.sizes]
    if layer.scale_fc is not None:
        alpha = scale_selection_weights(query, layer.scale_fc)
    else:
        alpha = Tensor(np.ones((n, 1)))
    attended, weights = multi_scale_smca(
        query, encoded.features, encoded.pos, layer.cross_attn, log_maps, alpha, return_weights=True
    )
    if trace is not None:
        trace.prior = prior
        trace.log_maps = log_maps
        trace.attention = weights
        trace.alpha = alpha.data.copy()
    tgt = layer.norm2(tgt + attended)
    return layer.norm3(tgt + layer.ffn(tgt))


class PredictionHeads(Module):
    """Class logits via one linear map; boxes via a 3-layer MLP and sigmoid."""

    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator):
        self.cls = Linear(dim, num_classes, rng)
        self.cls.bias.data[...] = -math.log((1.0 - FOCAL_PRIOR_PROB) / FOCAL_PRIOR_PROB)
        self.box = MLP([dim, dim, dim, 4], rng)


def predict_detections(
    layer_outputs: list[Tensor],
    heads: PredictionHeads,
    references: list[Tensor | None] | None = None,
) -> DetectionSet:
    """Class logits and boxes for every layer.

    A reference [N, 2] (pre-sigmoid prior center) shifts the box-center logits,
    so the box head predicts a correction to the query's own center estimate.
    """
    references = references or [None] * len(layer_outputs)
    logits = [heads.cls(q) for q in layer_outputs]
    boxes = []
    for q, ref in zip(layer_outputs, references):
        raw = heads.box(q)
        if ref is not None:
            raw = raw + concat([ref, Tensor(np.zeros(ref.shape))], axis=1)
        boxes.append(sigmoid(raw))
    return DetectionSet(logits=logits, boxes=boxes)


class Decoder(Module):
    def __init__(
        self,
        dim: int,
        heads: int,
        ffn_dim: int,
        depth: int,
        num_queries: int,
        num_scales: int,
        num_classes: int,
        modulation: str,
        rng: np.random.Generator,
        scale_init: float = 0.0,
    ):
        self.query_embed = Tensor(rng.normal(size=(num_queries, dim)), requires_grad=True)
        # learned initial content; all-zero content would leave the first layer's
        # query/key projections of self-attention without any gradient
        self.query_content = Tensor(rng.normal(size=(num_queries, dim)), requires_grad=True)
        self.layers = [
            DecoderLayer(dim, heads, ffn_dim, num_scales, modulation, rng, scale_init) for _ in range(depth)
        ]
        self.heads = PredictionHeads(dim, num_classes, rng)

    @property
    def num_queries(self) -> int:
        return self.query_embed.shape[0]


def decode(
    encoded: MultiScaleFeatures,
    decoder: Decoder,
    beta: float = 1.0,
    traces: list | None = None,
    box_reference: bool = False,
) -> DetectionSet:
    """Run every decoder layer; one detection set per layer, final layer last.

    With ``box_reference`` each modulated layer's boxes are predicted
    relative to the center of that layer's spatial prior.
    """
    query_pos = decoder.query_embed
    tgt = decoder.query_content
    outputs = []
    references = []
    for layer in decoder.layers:
        trace = LayerTrace()
        tgt = decoder_layer(tgt, query_pos, encoded, layer, beta, trace)
        outputs.append(tgt)
        use_ref = box_reference and trace.prior is not None
        references.append(trace.prior.center_logit if use_ref else None)
        if traces is not None:
            traces.append(trace)
    return predict_detections(outputs, decoder.heads, references)
