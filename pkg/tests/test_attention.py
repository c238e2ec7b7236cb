"""Self-attention, co-attention, spatial prior prediction and modulated multi-scale attention."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smca.attention import (
    AttentionParams,
    PriorHead,
    co_attention,
    multi_head_self_attention,
    multi_scale_smca,
    predict_spatial_prior,
    scale_selection_weights,
    smca_attend,
)
from smca.geometry import SCALE_FLOOR
from smca.nn import Linear
from smca.tensor import Tensor, grad_check, parameter


def np_softmax(a):
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def lin(layer, x):
    out = x @ layer.weight.data
    return out if layer.bias is None else out + layer.bias.data


def loop_attention(params, q_in, k_in, v_in, log_g=None, scale=0):
    """Per-query, per-head loop over keys; returns the output before projection."""
    d = params.head_dim
    q = lin(params.q, q_in)
    k = lin(params.k[scale], k_in)
    v = lin(params.v[scale], v_in)
    out = np.zeros((len(q_in), params.dim))
    for n in range(len(q_in)):
        for h in range(params.heads):
            cols = slice(h * d, (h + 1) * d)
            logits = np.array([q[n, cols] @ k[m, cols] / math.sqrt(d) for m in range(len(k_in))])
            if log_g is not None:
                logits = logits + log_g[n, h if log_g.shape[1] > 1 else 0]
            w = np_softmax(logits)
            for m in range(len(k_in)):
                out[n, cols] += w[m] * v[m, cols]
    return out


def setup(seed, n=3, length=7, dim=8, heads=2, num_kv=1):
    rng = np.random.default_rng(seed)
    params = AttentionParams(dim, heads, rng, num_kv=num_kv)
    q = Tensor(rng.normal(size=(n, dim)))
    feats = Tensor(rng.normal(size=(length, dim)))
    pos = Tensor(rng.normal(size=(length, dim)))
    return rng, params, q, feats, pos


class TestSelfAttention:
    def test_single_token_returns_its_value(self):
        _, params, _, feats, pos = setup(0, length=1)
        out = multi_head_self_attention(feats, pos, params).data
        np.testing.assert_allclose(out, lin(params.out, lin(params.v[0], feats.data)), atol=1e-12)

    def test_identical_tokens_identical_outputs(self):
        rng, params, _, _, _ = setup(1)
        x = Tensor(np.tile(rng.normal(size=(1, 8)), (5, 1)))
        out = multi_head_self_attention(x, Tensor(np.zeros((5, 8))), params).data
        np.testing.assert_allclose(out, np.tile(out[:1], (5, 1)), atol=1e-12)

    def test_permutation_equivariance_without_positions(self):
        rng, params, _, feats, _ = setup(2)
        perm = rng.permutation(7)
        out = multi_head_self_attention(feats, None, params).data
        permuted = multi_head_self_attention(Tensor(feats.data[perm]), None, params).data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-12)

    def test_matches_loop_reference(self):
        _, params, _, feats, pos = setup(3)
        xp = feats.data + pos.data
        want = lin(params.out, loop_attention(params, xp, xp, feats.data))
        np.testing.assert_allclose(multi_head_self_attention(feats, pos, params).data, want, atol=1e-12)

    def test_empty_sequence_rejected(self):
        _, params, _, _, _ = setup(4)
        with pytest.raises(ValueError):
            multi_head_self_attention(Tensor(np.zeros((0, 8))), None, params)

    def test_width_must_split_into_heads(self):
        with pytest.raises(ValueError):
            AttentionParams(10, 4, np.random.default_rng(0))


class TestCoAttention:
    def test_identical_feature_rows(self):
        rng, params, q, _, _ = setup(5)
        row = rng.normal(size=(1, 8))
        feats = Tensor(np.tile(row, (6, 1)))
        out = co_attention(q, feats, None, params).data
        want = lin(params.out, lin(params.v[0], row))
        np.testing.assert_allclose(out, np.tile(want, (3, 1)), atol=1e-12)

    def test_zero_query_projection_averages_values(self):
        _, params, q, feats, pos = setup(6)
        params.q.zero_()
        out = co_attention(q, feats, pos, params).data
        want = lin(params.out, lin(params.v[0], feats.data).mean(axis=0, keepdims=True))
        np.testing.assert_allclose(out, np.tile(want, (3, 1)), atol=1e-12)

    def test_matches_loop_reference(self):
        _, params, q, feats, pos = setup(7)
        want = lin(params.out, loop_attention(params, q.data, feats.data + pos.data, feats.data))
        np.testing.assert_allclose(co_attention(q, feats, pos, params).data, want, atol=1e-12)

    def test_empty_inputs_rejected(self):
        _, params, q, feats, _ = setup(8)
        with pytest.raises(ValueError):
            co_attention(q, Tensor(np.zeros((0, 8))), None, params)
        with pytest.raises(ValueError):
            co_attention(Tensor(np.zeros((0, 8))), feats, None, params)


class TestModulatedAttention:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10**6), st.integers(1, 4), st.integers(1, 16), st.sampled_from([1, 2, 4]))
    def test_zero_log_map_is_plain_co_attention(self, seed, n, length, heads):
        _, params, q, feats, pos = setup(seed, n=n, length=length, dim=4 * heads, heads=heads)
        zero = Tensor(np.zeros((n, heads, length)))
        np.testing.assert_allclose(
            smca_attend(q, feats, pos, params, zero).data, co_attention(q, feats, pos, params).data, rtol=0, atol=1e-12
        )

    def test_matches_loop_reference(self):
        rng, params, q, feats, pos = setup(9)
        log_g = -rng.uniform(0, 5, size=(3, 2, 7))
        want = lin(params.out, loop_attention(params, q.data, feats.data + pos.data, feats.data, log_g))
        np.testing.assert_allclose(smca_attend(q, feats, pos, params, Tensor(log_g)).data, want, atol=1e-12)

    def test_factorization(self):
        rng, params, q, feats, pos = setup(10)
        log_g = -rng.uniform(0, 30, size=(3, 2, 7))
        _, weights = smca_attend(q, feats, pos, params, Tensor(log_g), return_weights=True)
        _, plain = co_attention(q, feats, pos, params, return_weights=True)
        for h in range(2):
            mod = plain.data[h] * np.exp(log_g[:, h])
            np.testing.assert_allclose(weights.data[h], mod / mod.sum(axis=1, keepdims=True), atol=1e-9)

    def test_shared_map_equals_repeated_per_head_map(self):
        rng, params, q, feats, pos = setup(11)
        shared = -rng.uniform(0, 3, size=(3, 1, 7))
        a = smca_attend(q, feats, pos, params, Tensor(shared)).data
        b = smca_attend(q, feats, pos, params, Tensor(np.repeat(shared, 2, axis=1))).data
        np.testing.assert_allclose(a, b, atol=1e-14)

    def test_dominant_cell(self):
        rng, params, _, _, _ = setup(12, length=5)
        q = Tensor(rng.uniform(-50, 50, size=(2, 8)))
        feats = Tensor(rng.normal(size=(5, 8)))
        log_g = np.full((2, 1, 5), -1000.0)
        log_g[:, :, 3] = 0.0
        # logits bounded by |q.k| / sqrt(d): small next to the 1000 gap
        _, w = smca_attend(q, feats, None, params, Tensor(log_g), return_weights=True)
        assert (w.data[:, :, 3] >= 1 - 1e-300).all()

    def test_weight_rows_sum_to_one(self):
        rng, params, q, feats, pos = setup(13)
        _, w = smca_attend(q, feats, pos, params, Tensor(-rng.uniform(0, 50, (3, 2, 7))), return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_grid_shaped_map_accepted(self):
        rng, params, q, _, _ = setup(14)
        feats = Tensor(rng.normal(size=(12, 8)))
        grid = -rng.uniform(0, 2, size=(3, 1, 3, 4))
        a = smca_attend(q, feats, None, params, Tensor(grid)).data
        b = smca_attend(q, feats, None, params, Tensor(grid.reshape(3, 1, 12))).data
        np.testing.assert_array_equal(a, b)

    def test_size_mismatch_rejected(self):
        _, params, q, feats, pos = setup(15)
        with pytest.raises(ValueError, match="length"):
            smca_attend(q, feats, pos, params, Tensor(np.zeros((3, 1, 6))))

    def test_head_count_mismatch_rejected(self):
        _, params, q, feats, pos = setup(16)
        with pytest.raises(ValueError):
            smca_attend(q, feats, pos, params, Tensor(np.zeros((3, 3, 7))))

    def test_gradient_through_log_map(self):
        rng, params, q, feats, pos = setup(17)
        log_g = parameter(-rng.uniform(0, 2, size=(3, 2, 7)))
        w = Tensor(rng.normal(size=(3, 8)))
        assert grad_check(lambda: (smca_attend(q, feats, pos, params, log_g) * w).sum(), [log_g] + params.parameters()).passed


class TestSpatialPrior:
    def test_zero_parameters(self):
        rng = np.random.default_rng(0)
        head = PriorHead(8, 2, rng)
        for p in head.parameters():
            p.data[...] = 0.0
        prior = predict_spatial_prior(Tensor(rng.normal(size=(3, 8))), head)
        np.testing.assert_allclose(prior.center.data, 0.5, atol=1e-15)
        np.testing.assert_array_equal(prior.offsets.data, 0.0)
        np.testing.assert_allclose(prior.scales.data, math.log(2.0) + SCALE_FLOOR, atol=1e-15)

    def test_shared_head_has_no_offsets(self):
        head = PriorHead(8, 1, np.random.default_rng(1))
        prior = predict_spatial_prior(Tensor(np.random.default_rng(2).normal(size=(4, 8))), head)
        assert head.offset is None and prior.offsets.shape == (4, 1, 2)
        np.testing.assert_array_equal(prior.offsets.data, 0.0)

    @given(st.floats(-5.0, 5.0))
    def test_center_strictly_inside(self, v):
        head = PriorHead(4, 1, np.random.default_rng(3))
        prior = predict_spatial_prior(Tensor(np.full((1, 4), v)), head)
        assert np.abs(prior.center_logit.data).max() < 30  # float64 sigmoid rounds to 1 beyond ~37
        c = prior.center.data
        assert ((c > 0) & (c < 1)).all()

    def test_center_gradient_nonvanishing_for_bounded_logits(self):
        # sigmoid'(z) = s(1-s) at |z| = 20 is about 2.06e-9
        z = 20.0
        s = 1.0 / (1.0 + math.exp(-z))
        assert s * (1 - s) > 2e-9

    def test_scales_above_floor(self):
        rng = np.random.default_rng(4)
        head = PriorHead(8, 2, rng, scale_init=-30.0)
        prior = predict_spatial_prior(Tensor(rng.normal(size=(5, 8))), head)
        assert (prior.scales.data >= SCALE_FLOOR).all()

    def test_gradient(self):
        rng = np.random.default_rng(5)
        head = PriorHead(8, 2, rng)
        head.offset.weight.data[...] = rng.normal(scale=0.1, size=head.offset.weight.shape)
        q = parameter(rng.normal(size=(2, 8)))
        w = Tensor(rng.normal(size=(2, 2, 2)))

        def f():
            p = predict_spatial_prior(q, head)
            return (p.head_centers() * w).sum() + (p.scales * w).sum()

        assert grad_check(f, [q] + head.parameters()).passed


class TestScaleSelection:
    def test_zero_fc_uniform(self):
        fc = Linear(8, 3, np.random.default_rng(0)).zero_()
        np.testing.assert_allclose(scale_selection_weights(Tensor(np.ones((2, 8))), fc).data, 1 / 3, atol=1e-15)

    def test_log_two_logits(self):
        fc = Linear(1, 3, np.random.default_rng(0)).zero_()
        fc.bias.data[:] = [math.log(2.0), 0.0, 0.0]
        np.testing.assert_allclose(scale_selection_weights(Tensor(np.ones((1, 1))), fc).data, [[0.5, 0.25, 0.25]], atol=1e-15)

    @given(st.integers(0, 10**6))
    def test_rows_sum_to_one(self, seed):
        rng = np.random.default_rng(seed)
        fc = Linear(4, 3, rng)
        w = scale_selection_weights(Tensor(rng.normal(scale=5, size=(6, 4))), fc).data
        assert (w >= 0).all()
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-9)


def multi_setup(seed, scales=3, n=3, dim=8, heads=2):
    rng = np.random.default_rng(seed)
    params = AttentionParams(dim, heads, rng, num_kv=scales)
    q = Tensor(rng.normal(size=(n, dim)))
    lengths = [16, 4, 1][:scales]
    feats = [Tensor(rng.normal(size=(m, dim))) for m in lengths]
    pos = [Tensor(rng.normal(size=(m, dim))) for m in lengths]
    logs = [Tensor(-rng.uniform(0, 4, size=(n, heads, m))) for m in lengths]
    return rng, params, q, feats, pos, logs


class TestMultiScale:
    def test_one_hot_selects_scale(self):
        rng, params, q, feats, pos, logs = multi_setup(0)
        for j in range(3):
            alpha = np.zeros((3, 3))
            alpha[:, j] = 1.0
            got = multi_scale_smca(q, feats, pos, params, logs, Tensor(alpha)).data
            want = smca_attend(q, feats[j], pos[j], params, logs[j], scale=j).data
            np.testing.assert_allclose(got, want, atol=1e-10)

    def test_identical_scales_any_alpha(self):
        rng, params, q, feats, pos, logs = multi_setup(1)
        for j in (1, 2):
            params.k[j].weight.data[...] = params.k[0].weight.data
            params.v[j].weight.data[...] = params.v[0].weight.data
            params.v[j].bias.data[...] = params.v[0].bias.data
        alpha = Tensor(np_softmax(rng.normal(size=(3, 3))))
        got = multi_scale_smca(q, [feats[0]] * 3, [pos[0]] * 3, params, [logs[0]] * 3, alpha).data
        np.testing.assert_allclose(got, smca_attend(q, feats[0], pos[0], params, logs[0]).data, atol=1e-12)

    def test_matches_loop_reference(self):
        rng, params, q, feats, pos, logs = multi_setup(2)
        alpha = np_softmax(rng.normal(size=(3, 3)))
        total = 0.0
        for j in range(3):
            total = total + alpha[:, j : j + 1] * loop_attention(
                params, q.data, feats[j].data + pos[j].data, feats[j].data, logs[j].data, scale=j
            )
        got = multi_scale_smca(q, feats, pos, params, logs, Tensor(alpha)).data
        np.testing.assert_allclose(got, lin(params.out, total), atol=1e-12)

    def test_linear_in_alpha(self):
        rng, params, q, feats, pos, logs = multi_setup(3)
        params.out.bias.data[...] = 0.0  # the output bias is added once, not per scale
        alpha = rng.uniform(0, 1, size=(3, 3))
        got = multi_scale_smca(q, feats, pos, params, logs, Tensor(alpha)).data
        parts = []
        for j in range(3):
            one_hot = np.zeros((3, 3))
            one_hot[:, j] = 1.0
            parts.append(multi_scale_smca(q, feats, pos, params, logs, Tensor(one_hot)).data)
        np.testing.assert_allclose(got, sum(alpha[:, j : j + 1] * parts[j] for j in range(3)), atol=1e-9)

    def test_scale_count_mismatch_rejected(self):
        _, params, q, feats, pos, logs = multi_setup(4)
        with pytest.raises(ValueError):
            multi_scale_smca(q, feats, pos, params, logs, Tensor(np.full((3, 2), 0.5)))

    def test_gradient(self):
        rng, params, q, feats, pos, logs = multi_setup(5, n=2)
        fc = Linear(8, 3, rng)
        qp = parameter(q.data)
        w = Tensor(rng.normal(size=(2, 8)))
        f = lambda: (multi_scale_smca(qp, feats, pos, params, logs, scale_selection_weights(qp, fc)) * w).sum()
        assert grad_check(f, [qp] + params.parameters() + fc.parameters()).passed
