"""Decoder layers, prediction heads and the full decoding pass."""
import math

import numpy as np
import pytest

from smca.attention import co_attention, multi_head_self_attention
from smca.decoder import (
    FOCAL_PRIOR_PROB,
    Decoder,
    DecoderLayer,
    LayerTrace,
    PredictionHeads,
    decode,
    decoder_layer,
    predict_detections,
)
from smca.encoder import MultiScaleFeatures, sinusoidal_pos_embedding
from smca.tensor import Tensor, grad_check, parameter

DIM, HEADS, FFN, N = 8, 2, 16, 3


def make_feats(seed, sizes=((4, 4), (2, 2), (1, 1))):
    rng = np.random.default_rng(seed)
    return MultiScaleFeatures(
        rates=[4, 8, 16][: len(sizes)],
        sizes=list(sizes),
        features=[Tensor(rng.normal(size=(h * w, DIM))) for h, w in sizes],
        pos=[Tensor(sinusoidal_pos_embedding(h, w, DIM)) for h, w in sizes],
    )


def queries(seed):
    rng = np.random.default_rng(seed)
    return Tensor(rng.normal(size=(N, DIM))), Tensor(rng.normal(size=(N, DIM)))


class TestDecoderLayer:
    @pytest.mark.parametrize("modulation", ["off", "shared", "multihead"])
    def test_shape_preserved(self, modulation):
        layer = DecoderLayer(DIM, HEADS, FFN, 3, modulation, np.random.default_rng(0))
        tgt, qpos = queries(1)
        assert decoder_layer(tgt, qpos, make_feats(2), layer).shape == (N, DIM)

    def test_unknown_modulation_rejected(self):
        with pytest.raises(ValueError):
            DecoderLayer(DIM, HEADS, FFN, 1, "always", np.random.default_rng(0))

    def test_unmodulated_single_scale_is_vanilla_layer(self):
        layer = DecoderLayer(DIM, HEADS, FFN, 1, "off", np.random.default_rng(3))
        tgt, qpos = queries(4)
        feats = make_feats(5, sizes=((3, 3),))
        got = decoder_layer(tgt, qpos, feats, layer).data
        # self-attention, co-attention, feedforward; each residual then LayerNorm
        x = layer.norm1(tgt + multi_head_self_attention(tgt, qpos, layer.self_attn))
        x = layer.norm2(x + co_attention(x + qpos, feats.features[0], feats.pos[0], layer.cross_attn))
        want = layer.norm3(x + layer.ffn(x)).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_trace_records_prior_and_weights(self):
        layer = DecoderLayer(DIM, HEADS, FFN, 3, "multihead", np.random.default_rng(6))
        tgt, qpos = queries(7)
        trace = LayerTrace()
        decoder_layer(tgt, qpos, make_feats(8), layer, trace=trace)
        assert trace.prior.offsets.shape == (N, HEADS, 2)
        assert [m.shape for m in trace.log_maps] == [(N, HEADS, 4, 4), (N, HEADS, 2, 2), (N, HEADS, 1, 1)]
        for w in trace.attention:
            np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(trace.alpha.sum(axis=1), 1.0, atol=1e-12)

    def test_uniform_logits_follow_gaussian(self):
        layer = DecoderLayer(DIM, HEADS, FFN, 1, "shared", np.random.default_rng(9))
        layer.cross_attn.q.zero_()  # every co-attention logit is zero
        tgt, qpos = queries(10)
        trace = LayerTrace()
        decoder_layer(tgt, qpos, make_feats(11, sizes=((8, 8),)), layer, beta=1.5, trace=trace)
        g = np.exp(trace.log_maps[0].data[:, 0].reshape(N, 64))
        for h in range(HEADS):
            np.testing.assert_allclose(trace.attention[0].data[h], g / g.sum(axis=1, keepdims=True), atol=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(12)
        layer = DecoderLayer(DIM, HEADS, FFN, 3, "multihead", rng, scale_init=0.5)
        layer.prior.offset.weight.data[...] = rng.normal(scale=0.05, size=layer.prior.offset.weight.shape)
        layer.scale_fc.weight.data[...] = rng.normal(scale=0.1, size=layer.scale_fc.weight.shape)
        tgt = parameter(rng.normal(size=(2, DIM)))
        qpos = Tensor(rng.normal(size=(2, DIM)))
        w = Tensor(rng.normal(size=(2, DIM)))
        feats = make_feats(13)
        report = grad_check(lambda: (decoder_layer(tgt, qpos, feats, layer) * w).sum(), [tgt] + layer.parameters())
        assert report.passed, str(report)


class TestPredictionHeads:
    def test_zero_heads(self):
        heads = PredictionHeads(DIM, 3, np.random.default_rng(0))
        for p in heads.parameters():
            p.data[...] = 0.0
        dets = predict_detections([Tensor(np.random.default_rng(1).normal(size=(N, DIM)))], heads)
        np.testing.assert_array_equal(dets.boxes[0].data, 0.5)
        np.testing.assert_array_equal(dets.logits[0].data, 0.0)

    def test_zero_heads_with_reference_center(self):
        heads = PredictionHeads(DIM, 3, np.random.default_rng(0))
        for p in heads.parameters():
            p.data[...] = 0.0
        ref = Tensor(np.array([[0.3, -1.2], [2.0, 0.0], [0.0, 0.0]]))
        dets = predict_detections([Tensor(np.ones((N, DIM)))], heads, [ref])
        centers = 1.0 / (1.0 + np.exp(-ref.data))
        np.testing.assert_allclose(dets.boxes[0].data[:, :2], centers, atol=1e-15)
        np.testing.assert_array_equal(dets.boxes[0].data[:, 2:], 0.5)

    def test_boxes_in_unit_interval(self):
        rng = np.random.default_rng(2)
        heads = PredictionHeads(DIM, 3, rng)
        dets = predict_detections([Tensor(rng.normal(scale=10, size=(20, DIM)))], heads)
        b = dets.boxes[0].data
        assert ((b >= 0) & (b <= 1)).all()

    def test_focal_initial_probability(self):
        heads = PredictionHeads(DIM, 3, np.random.default_rng(3))
        heads.cls.weight.data[...] = 0.0
        logits = predict_detections([Tensor(np.ones((N, DIM)))], heads).logits[0].data
        np.testing.assert_allclose(1.0 / (1.0 + np.exp(-logits)), FOCAL_PRIOR_PROB, atol=1e-6)
        assert FOCAL_PRIOR_PROB == 0.01
        assert heads.cls.bias.data[0] == pytest.approx(-math.log(99.0))


def make_decoder(modulation="shared", depth=2, seed=0, num_scales=3):
    return Decoder(DIM, HEADS, FFN, depth, N, num_scales, 3, modulation, np.random.default_rng(seed))


class TestDecode:
    def test_one_set_per_layer(self):
        for depth in (1, 3):
            dets = decode(make_feats(0), make_decoder(depth=depth))
            assert dets.num_layers == depth
            assert dets.final()[0].shape == (N, 3) and dets.final()[1].shape == (N, 4)

    def test_deterministic(self):
        a = decode(make_feats(1), make_decoder(seed=5))
        b = decode(make_feats(1), make_decoder(seed=5))
        for x, y in zip(a.boxes + a.logits, b.boxes + b.logits):
            np.testing.assert_array_equal(x.data, y.data)

    @pytest.mark.parametrize("modulation", ["off", "shared", "multihead"])
    def test_query_permutation(self, modulation):
        dec = make_decoder(modulation, seed=2)
        feats = make_feats(3)
        base = decode(feats, dec, box_reference=True)
        perm = np.array([2, 0, 1])
        dec.query_embed.data[...] = dec.query_embed.data[perm]
        dec.query_content.data[...] = dec.query_content.data[perm]
        moved = decode(feats, dec, box_reference=True)
        for a, b in zip(base.boxes + base.logits, moved.boxes + moved.logits):
            np.testing.assert_allclose(b.data, a.data[perm], atol=1e-12)

    def test_box_reference_only_for_modulated_layers(self):
        feats = make_feats(4)
        off = make_decoder("off", seed=6)
        a = decode(feats, off, box_reference=False)
        b = decode(feats, off, box_reference=True)
        np.testing.assert_array_equal(a.boxes[-1].data, b.boxes[-1].data)
        shared = make_decoder("shared", seed=6)
        traces = []
        c = decode(feats, shared, traces=traces, box_reference=True)
        d = decode(feats, shared, box_reference=False)
        assert not np.allclose(c.boxes[-1].data[:, :2], d.boxes[-1].data[:, :2])
        np.testing.assert_array_equal(c.boxes[-1].data[:, 2:], d.boxes[-1].data[:, 2:])
        assert len(traces) == 2 and traces[0].prior.center_logit is not None

    def test_unmodulated_equals_zero_log_maps(self):
        # an unmodulated decoder and the same weights fed all-zero maps agree
        feats = make_feats(7, sizes=((4, 4),))
        off = make_decoder("off", seed=8, num_scales=1)
        shared = make_decoder("shared", seed=8, num_scales=1)
        for lo, ls in zip(off.layers, shared.layers):
            ls.self_attn, ls.cross_attn, ls.ffn = lo.self_attn, lo.cross_attn, lo.ffn
            ls.norm1, ls.norm2, ls.norm3 = lo.norm1, lo.norm2, lo.norm3
            # a huge scale makes every log map entry vanish
            ls.prior.scale.weight.data[...] = 0.0
            ls.prior.scale.bias.data[...] = 1e9
        shared.query_embed, shared.query_content, shared.heads = off.query_embed, off.query_content, off.heads
        a = decode(feats, off).logits[-1].data
        b = decode(feats, shared).logits[-1].data
        np.testing.assert_allclose(a, b, atol=1e-9)
