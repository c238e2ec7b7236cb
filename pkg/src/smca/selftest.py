"""Oracle suites for the attention, geometry, matching and differentiation code.

Each suite compares the implementation against an independent reference
(brute force, closed form or finite differences) on random instances and
returns a :class:`SuiteResult`. ``run_all`` drives them for the CLI.
"""
from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionParams,
    PriorHead,
    co_attention,
    multi_head_self_attention,
    multi_scale_smca,
    predict_spatial_prior,
    scale_selection_weights,
    smca_attend,
)
from .config import SceneConfig, TrainConfig
from .data import generate_scene
from .decoder import Decoder, DecoderLayer, decode, decoder_layer
from .encoder import Encoder, MultiScaleFeatures, TransformerBlock, encode, sinusoidal_pos_embedding
from .geometry import SpatialPrior, cxcywh_to_xyxy, giou, giou_tensor, log_gaussian_map, rasterize_prior
from .matching import focal_loss, focal_terms, hungarian, set_loss
from .model import MiniBackbone, SMCAModel, mini_backbone
from .nn import Linear
from .tensor import (
    Tensor,
    broadcast_to,
    concat,
    conv2d,
    grad_check,
    layer_norm,
    linear,
    log_softmax_lastdim,
    matmul,
    maximum,
    minimum,
    no_grad,
    parameter,
    relu,
    sigmoid,
    softmax_lastdim,
    softplus,
    stack,
)

GRAD_H = 1e-5
GRAD_TOL = 1e-4


@dataclass
class SuiteResult:
    name: str
    passed: bool
    worst: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.name}: worst {self.worst:.3e} (tol {self.tolerance:g}) in {self.seconds:.2f}s {self.detail}".rstrip()


def _random_attention(rng, heads=None, n=None, length=None):
    heads = heads or int(rng.integers(1, 5))
    d = int(rng.integers(1, 5))
    dim = heads * d
    n = n or int(rng.integers(1, 5))
    length = length or int(rng.integers(1, 17))
    params = AttentionParams(dim, heads, rng)
    q = Tensor(rng.normal(size=(n, dim)))
    feats = Tensor(rng.normal(size=(length, dim)))
    pos = Tensor(rng.normal(size=(length, dim)))
    return params, q, feats, pos


# criterion-style suites ------------------------------------------------------


def modulation_identity_suite(instances: int = 100, seed: int = 0) -> SuiteResult:
    """smca_attend with an all-zero log map against plain co-attention."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        params, q, feats, pos = _random_attention(rng)
        n, length = q.shape[0], feats.shape[0]
        p = 1 if rng.random() < 0.5 else params.heads
        zero = Tensor(np.zeros((n, p, length)))
        a = smca_attend(q, feats, pos, params, zero).data
        b = co_attention(q, feats, pos, params).data
        worst = max(worst, float(np.abs(a - b).max()))
    tol = 1e-12
    return SuiteResult("modulation identity", worst <= tol, worst, tol, time.perf_counter() - start, f"({instances} instances)")


def factorization_suite(instances: int = 100, seed: int = 1) -> SuiteResult:
    """Attention weights of smca_attend against renormalized Softmax(A) * G.

    ``A`` is recomputed from the projection weights with plain numpy.
    """
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        params, q, feats, pos = _random_attention(rng)
        n, length, heads = q.shape[0], feats.shape[0], params.heads
        log_g = -rng.uniform(0.0, 60.0, size=(n, heads, length))  # G >= 1e-26
        _, weights = smca_attend(q, feats, pos, params, Tensor(log_g), return_weights=True)
        d = params.head_dim
        qp = q.data @ params.q.weight.data + params.q.bias.data
        kp = (feats.data + pos.data) @ params.k[0].weight.data
        for h in range(heads):
            a = qp[:, h * d : (h + 1) * d] @ kp[:, h * d : (h + 1) * d].T / math.sqrt(d)
            e = np.exp(a - a.max(axis=1, keepdims=True))
            soft = e / e.sum(axis=1, keepdims=True)
            mod = soft * np.exp(log_g[:, h])
            ref = mod / mod.sum(axis=1, keepdims=True)
            worst = max(worst, float(np.abs(weights.data[h] - ref).max()))
    tol = 1e-9
    return SuiteResult("factorization", worst <= tol, worst, tol, time.perf_counter() - start, f"({instances} instances)")


def _brute_force_assignment(cost: np.ndarray) -> float:
    t, n = cost.shape
    best = math.inf
    for cols in itertools.permutations(range(n), t):
        total = 0.0
        for r, c in enumerate(cols):
            total += cost[r, c]
        best = min(best, total)
    return best


def hungarian_suite(instances: int = 200, seed: int = 2) -> SuiteResult:
    """Optimal totals against exhaustive search over all injections (T <= 5, N <= 6)."""
    start = time.perf_counter()
    rng = np.random.default_rng(seed)
    mismatches = 0
    worst = 0.0
    for k in range(instances):
        n = int(rng.integers(1, 7))
        t = int(rng.integers(1, min(n, 5) + 1))
        # half real-valued, half small integers (plenty of ties)
        cost = rng.normal(size=(t, n)) if k % 2 == 0 else rng.integers(0, 4, size=(t, n)).astype(float)
        got = hungarian(cost)
        if len(set(got.query_of.tolist())) != t:
            mismatches += 1
            continue
        gap = abs(got.total_cost - _brute_force_assignment(cost))
        worst = max(worst, gap)
        mismatches += gap != 0.0
    return SuiteResult(
        "hungarian vs brute force",
        mismatches == 0,
        worst,
        0.0,
        time.perf_counter() - start,
        f"({instances} matrices, {mismatches} mismatches)",
    )


def _bce(logit: float, target: float) -> float:
    p = 1.0 / (1.0 + math.exp(-logit))
    return -(target * math.log(p) + (1.0 - target) * math.log1p(-p))


def focal_reduction_check(seed: int = 3, count: int = 200) -> float:
    """Largest gap between gamma=0 focal loss and binary cross-entropy.

    With the balancing weight alpha=1 only positive targets keep their full
    weight, so those are compared; the unbalanced form (alpha=None) is
    compared on both target values. Scalar and tensor forms are both covered.
    """
    rng = np.random.default_rng(seed)
    logits = rng.uniform(-8.0, 8.0, size=count)
    worst = 0.0
    for x in logits:
        worst = max(worst, abs(focal_loss(x, 1.0, alpha=1.0, gamma=0.0) - _bce(x, 1.0)))
        for t in (0.0, 1.0):
            worst = max(worst, abs(focal_loss(x, t, alpha=None, gamma=0.0) - _bce(x, t)))
    targets = (rng.random(count) < 0.5).astype(float)
    tens = focal_terms(Tensor(logits), targets, alpha=None, gamma=0.0).data
    ref = np.array([_bce(x, t) for x, t in zip(logits, targets)])
    worst = max(worst, float(np.abs(tens - ref).max()))
    pos = focal_terms(Tensor(logits), np.ones(count), alpha=1.0, gamma=0.0).data
    worst = max(worst, float(np.abs(pos - [_bce(x, 1.0) for x in logits]).max()))
    return worst


def one_hot_scale_check(instances: int = 50, seed: int = 4) -> float:
    """Multi-scale output under a one-hot scale weight against single-scale attention."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        heads = int(rng.integers(1, 5))
        dim = heads * int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        scales = int(rng.integers(2, 4))
        params = AttentionParams(dim, heads, rng, num_kv=scales)
        q = Tensor(rng.normal(size=(n, dim)))
        lengths = [int(rng.integers(1, 17)) for _ in range(scales)]
        feats = [Tensor(rng.normal(size=(m, dim))) for m in lengths]
        pos = [Tensor(rng.normal(size=(m, dim))) for m in lengths]
        logs = [Tensor(-rng.uniform(0, 5, size=(n, 1, m))) for m in lengths]
        j = int(rng.integers(scales))
        alpha = np.zeros((n, scales))
        alpha[:, j] = 1.0
        got = multi_scale_smca(q, feats, pos, params, logs, Tensor(alpha)).data
        ref = smca_attend(q, feats[j], pos[j], params, logs[j], scale=j).data
        worst = max(worst, float(np.abs(got - ref).max()))
    return worst


def giou_examples_check() -> float:
    cases = [
        (([0, 0, 1, 1], [0, 0, 1, 1]), 1.0),
        (([0, 0, 1, 1], [1, 0, 2, 1]), 0.0),
        (([0, 0, 1, 1], [2, 0, 3, 1]), -1.0 / 3.0),
    ]
    return max(abs(giou(a, b) - want) for (a, b), want in cases)


def reduction_ladder_suite() -> list[SuiteResult]:
    out = []
    for name, fn, tol in (
        ("focal -> cross-entropy", focal_reduction_check, 1e-12),
        ("one-hot scale weights -> single scale", one_hot_scale_check, 1e-10),
        ("GIoU examples", giou_examples_check, 1e-12),
    ):
        start = time.perf_counter()
        worst = fn()
        out.append(SuiteResult(name, worst <= tol, worst, tol, time.perf_counter() - start))
    return out


def gaussian_analytics_suite(seed: int = 5) -> list[SuiteResult]:
    """Closed-form values of the log weight map and of modulated attention ratios."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        beta = float(rng.uniform(0.25, 4.0))
        reach = int(rng.integers(1, 4))  # sqrt(beta) * s in cells
        s = reach / math.sqrt(beta)
        width, height = int(rng.integers(2 * reach + 1, 16)), int(rng.integers(2 * reach + 1, 16))
        cw, ch = int(rng.integers(reach, width - reach)), int(rng.integers(reach, height - reach))
        lg = log_gaussian_map(np.array([cw, ch], float), np.array([s, s], float), (width, height), beta).data
        worst = max(worst, abs(lg[ch, cw]))
        worst = max(worst, abs(lg[ch, cw + reach] + 1.0), abs(lg[ch + reach, cw] + 1.0))
        for delta in range(1, reach + 1):
            worst = max(worst, abs(lg[ch, cw + delta] - lg[ch, cw - delta]))
            worst = max(worst, abs(lg[ch + delta, cw] - lg[ch - delta, cw]))
    analytic = SuiteResult("log map: 0 at center, -1 at reach, even", worst <= 1e-12, worst, 1e-12, time.perf_counter() - start)

    start = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        heads = int(rng.integers(1, 5))
        dim = heads * 2
        params = AttentionParams(dim, heads, rng)
        params.q.weight.data[...] = 0.0
        params.q.bias.data[...] = 0.0  # every logit is exactly zero
        width = height = 8
        beta = float(rng.uniform(0.5, 2.0))
        reach = int(rng.integers(1, 4))
        s = reach / math.sqrt(beta)
        cw, ch = int(rng.integers(reach, width - reach)), int(rng.integers(0, height))
        lg = log_gaussian_map(np.array([[cw, ch]], float), np.array([[s, s]], float), (width, height), beta)
        feats = Tensor(rng.normal(size=(width * height, dim)))
        _, w = smca_attend(Tensor(rng.normal(size=(1, dim))), feats, None, params, lg.reshape(1, 1, height, width), return_weights=True)
        for h in range(heads):
            ratio = w.data[h, 0, ch * width + cw] / w.data[h, 0, ch * width + cw + reach]
            worst = max(worst, abs(ratio - math.e))
    ratio = SuiteResult("uniform-logit attention ratio = e", worst <= 1e-9, worst, 1e-9, time.perf_counter() - start)
    return [analytic, ratio]


# gradient suite ----------------------------------------------------------------


def _away_from_zero(rng, shape, low=0.05, high=1.5):
    """Random values with |x| >= low, so kinked ops are never probed at a kink."""
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _op_cases(rng) -> list:
    """(name, forward closure, parameters) for every differentiable primitive and kernel."""
    cases = []

    def leaf(*shape, positive=False, kinked=False):
        if positive:
            return parameter(rng.uniform(0.5, 2.0, size=shape))
        return parameter(_away_from_zero(rng, shape) if kinked else rng.normal(size=shape))

    a, b = leaf(3, 4), leaf(4, 2)
    cases.append(("matmul", lambda: (matmul(a, b) ** 2).sum(), [a, b]))
    x3, y3 = leaf(2, 3, 4), leaf(2, 4, 3)
    cases.append(("batched matmul", lambda: (x3 @ y3).exp().sum(), [x3, y3]))
    x, w, bias = leaf(5, 4), leaf(4, 3), leaf(3)
    cases.append(("linear", lambda: (linear(x, w, bias) ** 2).sum(), [x, w, bias]))
    s = leaf(3, 5)
    wts = Tensor(rng.normal(size=(3, 5)))
    cases.append(("softmax", lambda: (softmax_lastdim(s) * wts).sum(), [s]))
    cases.append(("log-softmax", lambda: (log_softmax_lastdim(s) * wts).sum(), [s]))
    ln_x, gamma, beta = leaf(4, 6), leaf(6), leaf(6)
    ln_w = Tensor(rng.normal(size=(4, 6)))
    cases.append(("layer norm", lambda: (layer_norm(ln_x, gamma, beta) * ln_w).sum(), [ln_x, gamma, beta]))
    img, kern, kb = leaf(2, 6, 6), leaf(3, 2, 3, 3), leaf(3)
    cw_ = Tensor(rng.normal(size=(3, 3, 3)))
    cases.append(("conv2d stride 2", lambda: (conv2d(img, kern, kb, stride=2, padding=1) * cw_).sum(), [img, kern, kb]))
    c1, c2 = leaf(2, 3), leaf(1, 3)
    cases.append(("concat/stack", lambda: (concat([c1, c2]) ** 3).sum() + (stack([c1, c1 * 2.0]) ** 2).sum(), [c1, c2]))
    bt = leaf(1, 3)
    bw_ = Tensor(rng.normal(size=(4, 3)))
    cases.append(("broadcast_to", lambda: (broadcast_to(bt, (4, 3)) * bw_).sum(), [bt]))
    m1, m2 = leaf(6), leaf(6)
    m2.data[...] = m1.data + _away_from_zero(rng, 6)  # no ties
    cases.append(("maximum/minimum", lambda: (maximum(m1, m2) * 2.0 + minimum(m1, m2) ** 2).sum(), [m1, m2]))
    k = leaf(8, kinked=True)
    cases.append(("relu/abs", lambda: (relu(k) ** 2).sum() + (k.abs() * 3.0).sum(), [k]))
    u = leaf(7)
    cases.append(("sigmoid/softplus", lambda: (sigmoid(u) * softplus(u * 2.0)).sum(), [u]))
    pz = leaf(5, positive=True)
    cases.append(("exp/log/sqrt/pow/div", lambda: (pz.log() + pz.sqrt() + pz**1.5 + 1.0 / pz + (pz * 0.3).exp()).sum(), [pz]))
    g = leaf(3, 4)
    cases.append(("index/reshape/transpose/mean", lambda: (g[1:, ::2].reshape(4).mean() + g.T[2].sum() * 2.0) ** 2, [g]))

    center, scales = leaf(2, 2), leaf(2, 2, positive=True)
    center.data[...] = rng.uniform(0.5, 4.5, size=(2, 2))
    gw = Tensor(rng.normal(size=(2, 5, 6)))
    cases.append(("log gaussian map", lambda: (log_gaussian_map(center, scales, (6, 5), 1.3) * gw).sum(), [center, scales]))
    pc, po, ps = leaf(2, 2), leaf(2, 3, 2), leaf(2, 3, 2, positive=True)
    pc.data[...] = rng.uniform(0.2, 0.8, size=(2, 2))
    po.data[...] *= 0.1
    ps.data[...] *= 0.3
    rw = Tensor(rng.normal(size=(2, 3, 4, 4)))
    cases.append(
        ("rasterize prior", lambda: (rasterize_prior(SpatialPrior(pc, po, ps, 0.8), (4, 4)) * rw).sum(), [pc, po, ps])
    )
    bx = leaf(3, 4)
    bx.data[...] = np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.2, 0.5, (3, 2))])
    tgt = cxcywh_to_xyxy(np.column_stack([rng.uniform(0.3, 0.7, (3, 2)), rng.uniform(0.2, 0.5, (3, 2))]))
    cases.append(("giou (tensor)", lambda: (1.0 - giou_tensor(cxcywh_to_xyxy(bx), tgt)).sum(), [bx]))
    fl = leaf(4, 3)
    ft = (rng.random((4, 3)) < 0.3).astype(float)
    cases.append(("focal loss", lambda: focal_terms(fl, ft).sum(), [fl]))
    return cases


def _kernel_cases(rng) -> list:
    cases = []
    dim, heads = 8, 2
    params = AttentionParams(dim, heads, rng)
    x = parameter(rng.normal(size=(5, dim)))
    pos = Tensor(rng.normal(size=(5, dim)))
    out_w = Tensor(rng.normal(size=(5, dim)))
    cases.append(
        ("self-attention", lambda: (multi_head_self_attention(x, pos, params) * out_w).sum(), [x] + params.parameters())
    )
    q = parameter(rng.normal(size=(2, dim)))
    feats = parameter(rng.normal(size=(16, dim)))
    fpos = Tensor(rng.normal(size=(16, dim)))
    qw = Tensor(rng.normal(size=(2, dim)))
    cases.append(("co-attention", lambda: (co_attention(q, feats, fpos, params) * qw).sum(), [q, feats] + params.parameters()))

    prior = PriorHead(dim, heads, rng, scale_init=0.0)
    prior.offset.weight.data[...] = rng.normal(scale=0.05, size=prior.offset.weight.shape)

    def smca():
        pr = predict_spatial_prior(q, prior, beta=1.0)
        return (smca_attend(q, feats, fpos, params, rasterize_prior(pr, (4, 4))) * qw).sum()

    cases.append(("modulated co-attention (through prior)", smca, [q, feats] + params.parameters() + prior.parameters()))
    fc = Linear(dim, 3, rng)
    aw = Tensor(rng.normal(size=(2, 3)))
    cases.append(("scale selection", lambda: (scale_selection_weights(q, fc) * aw).sum(), [q] + fc.parameters()))
    ms_params = AttentionParams(dim, heads, rng, num_kv=3)
    sizes = [(4, 4), (2, 2), (1, 1)]
    ms_feats = [parameter(rng.normal(size=(h * w, dim))) for h, w in sizes]
    ms_pos = [Tensor(rng.normal(size=(h * w, dim))) for h, w in sizes]
    shared_prior = PriorHead(dim, 1, rng, scale_init=0.5)

    def multi_scale():
        pr = predict_spatial_prior(q, shared_prior)
        logs = [rasterize_prior(pr, (w, h)) for h, w in sizes]
        return (multi_scale_smca(q, ms_feats, ms_pos, ms_params, logs, scale_selection_weights(q, fc)) * qw).sum()

    cases.append(
        ("multi-scale modulated co-attention", multi_scale, [q] + ms_feats + ms_params.parameters() + shared_prior.parameters() + fc.parameters())
    )

    block = TransformerBlock(dim, heads, 8, rng)
    cases.append(("transformer block", lambda: (block(x, pos) * out_w).sum(), [x] + block.parameters()))
    enc = Encoder(dim, heads, 8, ["intra", "multi"], 3, rng)
    enc.level_embed.data[...] = rng.normal(scale=0.1, size=enc.level_embed.shape)
    feats_in = MultiScaleFeatures([4, 8, 16], sizes, ms_feats, [Tensor(sinusoidal_pos_embedding(h, w, dim)) for h, w in sizes])
    enc_w = [Tensor(rng.normal(size=(h * w, dim))) for h, w in sizes]

    def encoder_loss():
        out = encode(feats_in, enc)
        return concat([(f * wt).sum().reshape(1) for f, wt in zip(out.features, enc_w)]).sum()

    cases.append(("encoder (intra + multi)", encoder_loss, ms_feats + enc.parameters()))
    layer = DecoderLayer(dim, heads, 8, 3, "multihead", rng, scale_init=0.5)
    layer.scale_fc.weight.data[...] = rng.normal(scale=0.1, size=layer.scale_fc.weight.shape)
    tgt = parameter(rng.normal(size=(2, dim)))
    qpos = Tensor(rng.normal(size=(2, dim)))
    dec_in = MultiScaleFeatures([4, 8, 16], sizes, ms_feats, ms_pos)
    cases.append(
        ("decoder layer", lambda: (decoder_layer(tgt, qpos, dec_in, layer) * qw).sum(), [tgt] + layer.parameters())
    )
    backbone = MiniBackbone((4, 4, 4, 4), dim, (4, 8, 16), rng)
    image = parameter(rng.uniform(0, 1, size=(3, 16, 16)))
    bw = [Tensor(rng.normal(size=(h * w, dim))) for h, w in sizes]

    def backbone_loss():
        levels = mini_backbone(image, backbone)
        return concat([(f * wt).sum().reshape(1) for (_, _, _, f), wt in zip(levels, bw)]).sum()

    cases.append(("backbone", backbone_loss, [image] + backbone.parameters()))
    return cases


def full_loss_case(seed: int = 0):
    """The training objective of a 2-query model on one 4x4 feature grid.

    Parameters are moved off their initial values (zero-initialized layers,
    focal bias) by small noise so the check runs at a generic point.
    """
    cfg = TrainConfig(
        seed=seed,
        dim=8,
        heads=2,
        ffn_dim=8,
        num_queries=2,
        decoder_depth=2,
        backbone_channels=(4, 4, 4, 4),
        modulation="multihead",
        scales=(4,),
        scene=SceneConfig(image_size=16, max_objects=1, max_side=8),
    )
    model = SMCAModel(cfg)
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data += rng.normal(scale=0.1, size=p.shape)
    image, gt = generate_scene(seed, cfg.scene)
    return model, (lambda: set_loss(model(image), gt).terms), model.parameters()


def gradient_suite(seed: int = 6, include_full_loss: bool = True) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    results = []
    cases = _op_cases(rng) + _kernel_cases(rng)
    if include_full_loss:
        _, fwd, params = full_loss_case()
        cases.append(("full training loss (2 queries, 4x4 grid)", fwd, params))
    for name, fwd, params in cases:
        start = time.perf_counter()
        report = grad_check(fwd, params, h=GRAD_H, tol=GRAD_TOL)
        results.append(SuiteResult(f"grad: {name}", report.passed, report.worst, GRAD_TOL, time.perf_counter() - start))
    return results


def run_all(include_full_loss: bool = True) -> list[SuiteResult]:
    results = [modulation_identity_suite(), factorization_suite()]
    results += gradient_suite(include_full_loss=include_full_loss)
    results.append(hungarian_suite())
    results += reduction_ladder_suite()
    results += gaussian_analytics_suite()
    return results
