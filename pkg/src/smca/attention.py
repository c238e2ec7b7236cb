"""Multi-head attention kernels and the spatially modulated co-attention.

Token matrices are [L, C] (features) or [N, C] (object queries). Positional
embeddings are added to the key and query inputs, never to values.
"""
from __future__ import annotations

import math

import numpy as np

from .geometry import SCALE_FLOOR, SpatialPrior
from .nn import MLP, Linear, Module
from .tensor import Tensor, broadcast_to, sigmoid, softmax_lastdim, softplus


class AttentionParams(Module):
    """Projections for ``heads`` attention heads of width ``dim // heads``.

    ``num_kv`` separate key/value projection pairs are kept for multi-scale
    co-attention; the query and output projections are always shared.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, num_kv: int = 1):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        # a key bias shifts every logit of a query equally, so softmax ignores it
        self.k = [Linear(dim, dim, rng, bias=False) for _ in range(num_kv)]
        self.v = [Linear(dim, dim, rng) for _ in range(num_kv)]
        self.out = Linear(dim, dim, rng)

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_kv(self) -> int:
        return len(self.k)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return x.reshape(n, heads, c // heads).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    h, n, d = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * d)


def _head_bias(log_g: Tensor, heads: int, n: int, length: int) -> Tensor:
    """Reshape a per-query log map [N, P, ...] into an additive logit bias [heads, N, L]."""
    if log_g.shape[0] != n:
        raise ValueError(f"log map has {log_g.shape[0]} queries, expected {n}")
    p = log_g.shape[1]
    flat = log_g.reshape(n, p, -1)
    if flat.shape[2] != length:
        raise ValueError(f"log map covers {flat.shape[2]} cells but features have length {length}")
    if p == 1:
        return broadcast_to(flat.reshape(1, n, length), (heads, n, length))
    if p != heads:
        raise ValueError(f"log map has {p} heads, attention has {heads}")
    return flat.transpose(1, 0, 2)


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, bias: Tensor | None = None):
    """Scaled dot-product attention over already-projected tokens.

    Returns (concatenated head outputs [N, C], attention weights [heads, N, L]).
    """
    if k.shape[0] == 0 or q.shape[0] == 0:
        raise ValueError("attention needs at least one query and one key")
    qh, kh, vh = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    logits = (qh @ kh.transpose(0, 2, 1)) * (1.0 / math.sqrt(qh.shape[-1]))
    if bias is not None:
        logits = logits + bias
    weights = softmax_lastdim(logits)
    return _merge_heads(weights @ vh), weights


def multi_head_self_attention(x: Tensor, pos: Tensor | None, params: AttentionParams) -> Tensor:
    if x.shape[0] == 0:
        raise ValueError("self-attention over an empty sequence")
    xp = x if pos is None else x + pos
    out, _ = attend(params.q(xp), params.k[0](xp), params.v[0](x), params.heads)
    return params.out(out)


def co_attention(
    queries: Tensor,
    features: Tensor,
    feat_pos: Tensor | None,
    params: AttentionParams,
    scale: int = 0,
    return_weights: bool = False,
):
    """Plain co-attention from object queries onto encoded features."""
    return smca_attend(queries, features, feat_pos, params, None, scale, return_weights)


def smca_attend(
    queries: Tensor,
    features: Tensor,
    feat_pos: Tensor | None,
    params: AttentionParams,
    log_g: Tensor | None,
    scale: int = 0,
    return_weights: bool = False,
):
    """Co-attention whose logits are shifted by a per-query log weight map.

    ``log_g`` is [N, P, H, W] (or [N, P, L]) with P = 1 for a head-shared map
    or P = heads for head-specific maps. ``None`` is the unmodulated case.
    """
    if features.shape[0] == 0 or queries.shape[0] == 0:
        raise ValueError("co-attention needs non-empty queries and features")
    keys_in = features if feat_pos is None else features + feat_pos
    bias = None
    if log_g is not None:
        bias = _head_bias(log_g, params.heads, queries.shape[0], features.shape[0])
    out, weights = attend(params.q(queries), params.k[scale](keys_in), params.v[scale](features), params.heads, bias)
    out = params.out(out)
    return (out, weights) if return_weights else out


class PriorHead(Module):
    """Predicts the shared center, per-head offsets and per-head scales of a query.

    ``prior_heads`` is 1 for head-shared modulation (no offsets) or the number
    of attention heads for head-specific modulation.
    """

    def __init__(self, dim: int, prior_heads: int, rng: np.random.Generator, scale_init: float = 0.0):
        self.prior_heads = prior_heads
        self.center = MLP([dim, dim, 2], rng)
        self.offset = Linear(dim, 2 * prior_heads, rng).zero_() if prior_heads > 1 else None
        self.scale = Linear(dim, 2 * prior_heads, rng)
        self.scale.weight.data *= 0.1
        self.scale.bias.data[...] = scale_init


def predict_spatial_prior(queries: Tensor, head: PriorHead, beta: float = 1.0) -> SpatialPrior:
    n = queries.shape[0]
    p = head.prior_heads
    center_logit = head.center(queries)
    center = sigmoid(center_logit)
    if head.offset is None:
        offsets = Tensor(np.zeros((n, p, 2)))
    else:
        offsets = head.offset(queries).reshape(n, p, 2)
    scales = softplus(head.scale(queries).reshape(n, p, 2)) + SCALE_FLOOR
    return SpatialPrior(center=center, offsets=offsets, scales=scales, beta=beta, center_logit=center_logit)


def scale_selection_weights(queries: Tensor, fc: Linear) -> Tensor:
    """Per-query softmax weights over feature scales, [N, num_scales]."""
    return softmax_lastdim(fc(queries))


def multi_scale_smca(
    queries: Tensor,
    features: list[Tensor],
    feat_pos: list[Tensor | None],
    params: AttentionParams,
    log_gs: list[Tensor | None],
    alpha: Tensor,
    return_weights: bool = False,
):
    """Modulated co-attention against every scale, mixed by scale-selection weights.

    Each scale has its own key/value projection; the query projection is shared.
    Per-scale head outputs are scaled by that query's weight for the scale,
    summed, then passed through the output projection.
    """
    num_scales = len(features)
    if alpha.shape[1] != num_scales or params.num_kv != num_scales:
        raise ValueError(
            f"{alpha.shape[1]} scale weights and {params.num_kv} projections for {num_scales} feature scales"
        )
    n, c = queries.shape
    q = params.q(queries)
    total = None
    all_weights = []
    for j in range(num_scales):
        feats, pos = features[j], feat_pos[j]
        keys_in = feats if pos is None else feats + pos
        bias = None
        if log_gs[j] is not None:
            bias = _head_bias(log_gs[j], params.heads, n, feats.shape[0])
        out_j, w_j = attend(q, params.k[j](keys_in), params.v[j](feats), params.heads, bias)
        term = out_j * broadcast_to(alpha[:, j : j + 1], (n, c))
        total = term if total is None else total + term
        all_weights.append(w_j)
    out = params.out(total)
    return (out, all_weights) if return_weights else out
