"""Multi-scale transformer encoder.

Intra-scale blocks run self-attention separately inside each scale with one
parameter set serving every scale. Multi-scale blocks flatten all scales into
a single token sequence. The default arrangement is two intra-scale blocks, one
multi-scale block, then two more intra-scale blocks.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np

from .attention import AttentionParams, multi_head_self_attention
from .nn import FeedForward, LayerNorm, Module
from .tensor import Tensor, broadcast_to, concat, parameter

INTRA = "intra"
MULTI = "multi"


@dataclass
class MultiScaleFeatures:
    """Feature maps of several scales, flattened row-major to [H*W, C] each."""

    rates: list[int]
    sizes: list[tuple[int, int]]  # (height, width) per scale
    features: list[Tensor]
    pos: list[Tensor]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.rates, self.rates[1:])):
            raise ValueError(f"downsampling rates must be strictly increasing, got {self.rates}")
        for (h, w), f in zip(self.sizes, self.features):
            if f.shape[0] != h * w:
                raise ValueError(f"feature rows {f.shape[0]} != {h}*{w}")

    @property
    def num_scales(self) -> int:
        return len(self.features)

    def with_features(self, features: list[Tensor]) -> "MultiScaleFeatures":
        return replace(self, features=list(features))


def sinusoidal_pos_embedding(h: int, w: int, c: int, step: float = 1.0, temperature: float = 10000.0) -> np.ndarray:
    """2-D sine/cosine embedding of grid cell positions, shape [h*w, c].

    The first ``c/2`` channels encode the row, the rest the column. A cell at
    row ``y`` sits at ``y * step``; with a fixed ``step`` a smaller grid's
    embedding is the top-left block of a larger one's.
    """
    if c % 4:
        raise ValueError(f"embedding width {c} must be divisible by 4")
    quarter = c // 4
    freqs = temperature ** (-np.arange(quarter) / quarter)
    ys = np.arange(h, dtype=np.float64) * step
    xs = np.arange(w, dtype=np.float64) * step

    def encode(p):
        ang = p[:, None] * freqs[None, :]
        out = np.empty((len(p), 2 * quarter))
        out[:, 0::2] = np.sin(ang)
        out[:, 1::2] = np.cos(ang)
        return out

    ey, ex = encode(ys), encode(xs)
    grid_y = np.repeat(ey, w, axis=0)
    grid_x = np.tile(ex, (h, 1))
    return np.concatenate([grid_y, grid_x], axis=1)


class TransformerBlock(Module):
    """Self-attention and feedforward sublayers, each followed by residual + LayerNorm."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, rng: np.random.Generator):
        self.attn = AttentionParams(dim, heads, rng)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)

    def __call__(self, x: Tensor, pos: Tensor | None) -> Tensor:
        x = self.norm1(x + multi_head_self_attention(x, pos, self.attn))
        return self.norm2(x + self.ffn(x))


def intra_scale_block(feats: MultiScaleFeatures, block: TransformerBlock) -> MultiScaleFeatures:
    return feats.with_features([block(f, p) for f, p in zip(feats.features, feats.pos)])


def multi_scale_block(
    feats: MultiScaleFeatures, block: TransformerBlock, level_embed: Tensor | None = None
) -> MultiScaleFeatures:
    """One block over the concatenation of every scale's tokens.

    ``level_embed`` ([num_scales, C]) is added to the positional embedding of
    each scale's tokens so identical positions at different scales differ.
    """
    pos = []
    for j, p in enumerate(feats.pos):
        if level_embed is not None:
            p = p + broadcast_to(level_embed[j : j + 1], p.shape)
        pos.append(p)
    counts = [f.shape[0] for f in feats.features]
    out = block(concat(feats.features, axis=0), concat(pos, axis=0))
    bounds = np.cumsum([0] + counts)
    return feats.with_features([out[a:b] for a, b in zip(bounds[:-1], bounds[1:])])


def parse_arrangement(text: str) -> list[str]:
    """``"2Intra-Multi-2Intra"`` -> ``["intra", "intra", "multi", "intra", "intra"]``.

    An empty string gives an empty arrangement.
    """
    blocks: list[str] = []
    for part in filter(None, text.split("-")):
        m = re.fullmatch(r"(\d*)(intra|multi)", part.strip(), flags=re.IGNORECASE)
        if not m:
            raise ValueError(f"bad encoder block {part!r} in {text!r}")
        blocks += [m.group(2).lower()] * int(m.group(1) or 1)
    return blocks


class Encoder(Module):
    def __init__(self, dim: int, heads: int, ffn_dim: int, arrangement: list[str], num_scales: int, rng):
        self.arrangement = list(arrangement)
        self.blocks = [TransformerBlock(dim, heads, ffn_dim, rng) for _ in arrangement]
        self.level_embed = parameter(np.zeros((num_scales, dim)))

    def __call__(self, feats: MultiScaleFeatures) -> MultiScaleFeatures:
        return encode(feats, self)


def encode(feats: MultiScaleFeatures, encoder: Encoder) -> MultiScaleFeatures:
    for kind, block in zip(encoder.arrangement, encoder.blocks):
        if kind == INTRA:
            feats = intra_scale_block(feats, block)
        elif kind == MULTI:
            feats = multi_scale_block(feats, block, encoder.level_embed)
        else:
            raise ValueError(f"unknown block kind {kind!r}")
    return feats


def block_param_count(dim: int, heads: int, ffn_dim: int) -> int:
    """Parameters in one transformer block (for sharing comparisons)."""
    attn = 4 * dim * dim + 3 * dim  # q, k, v, out weights; no key bias
    ffn = dim * ffn_dim + ffn_dim + ffn_dim * dim + dim
    return attn + ffn + 4 * dim
