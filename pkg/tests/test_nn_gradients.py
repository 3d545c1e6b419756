"""Finite-difference checks of every hand-written backward in the kernel.

All checks run in float64 with h=1e-5 over at least 10 seeds; the loss is
a fixed random weighting of the output so every element participates.
"""

import numpy as np
import pytest

from tvp import nn

SEEDS = range(10)


def _weighted_loss(y, weights):
    return float((y * weights).sum())


def _check_layer(build, seeds=SEEDS, h=1e-5):
    worst = 0.0
    for seed in seeds:
        with nn.using_dtype(np.float64):
            rng = np.random.default_rng(seed)
            store = nn.ParamStore()
            forward_backward, inputs = build(store, rng)
            err = nn.grad_check(forward_backward, store, inputs, h=h)
        worst = max(worst, err)
    return worst


class TestLayerGradients:
    def test_linear(self):
        def build(store, rng):
            lin = nn.Linear(store, "lin", 3, 2, rng)
            x = rng.standard_normal((4, 3))
            w = rng.standard_normal((4, 2))

            def fn(x):
                y = lin.forward(x)
                return _weighted_loss(y, w), [lin.backward(w)]

            return fn, [x]

        assert _check_layer(build) < 1e-6

    def test_gelu(self):
        def build(store, rng):
            act = nn.Gelu()
            x = rng.standard_normal(12)
            w = rng.standard_normal(12)

            def fn(x):
                y = act.forward(x)
                return _weighted_loss(y, w), [act.backward(w)]

            return fn, [x]

        assert _check_layer(build) < 1e-6

    def test_layer_norm(self):
        def build(store, rng):
            norm = nn.LayerNorm(store, "norm", 5)
            x = rng.standard_normal((3, 5))
            w = rng.standard_normal((3, 5))

            def fn(x):
                y = norm.forward(x)
                return _weighted_loss(y, w), [norm.backward(w)]

            return fn, [x]

        assert _check_layer(build) < 1e-4

    def test_attention_kernel(self):
        def build(store, rng):
            attn = nn.Attention()
            q = rng.standard_normal((3, 2))
            k = rng.standard_normal((4, 2))
            v = rng.standard_normal((4, 3))
            w = rng.standard_normal((3, 3))

            def fn(q, k, v):
                y = attn.forward(q, k, v)
                return _weighted_loss(y, w), list(attn.backward(w))

            return fn, [q, k, v]

        assert _check_layer(build) < 1e-4

    def test_depthwise_conv3d(self):
        def build(store, rng):
            conv = nn.DepthwiseConv3d(store, "dw", 2, (3, 3, 3), rng)
            x = rng.standard_normal((2, 3, 4, 4))
            w = rng.standard_normal((2, 3, 4, 4))

            def fn(x):
                y = conv.forward(x)
                return _weighted_loss(y, w), [conv.backward(w)]

            return fn, [x]

        assert _check_layer(build) < 1e-4

    @pytest.mark.parametrize("stride", [1, 2])
    def test_conv2d(self, stride):
        def build(store, rng):
            conv = nn.Conv2d(store, "conv", 2, 3, k=3, stride=stride, rng=rng)
            x = rng.standard_normal((2, 2, 4, 4))

            def fn(x):
                y = conv.forward(x)
                w = np.arange(y.size, dtype=np.float64).reshape(y.shape) / y.size
                return _weighted_loss(y, w), [conv.backward(w)]

            return fn, [x]

        assert _check_layer(build) < 1e-4

    def test_embedding(self):
        def build(store, rng):
            emb = nn.Embedding(store, "emb", 6, 3, rng)
            ids = np.array([0, 2, 2, 5])
            w = rng.standard_normal((4, 3))

            def fn():
                y = emb.forward(ids)
                emb.backward(w)
                return _weighted_loss(y, w), []

            return fn, []

        assert _check_layer(build) < 1e-6

    def test_nearest_upsample(self):
        def build(store, rng):
            up = nn.NearestUpsample2x()
            x = rng.standard_normal((1, 2, 3, 3))
            w = rng.standard_normal((1, 2, 6, 6))

            def fn(x):
                y = up.forward(x)
                return _weighted_loss(y, w), [up.backward(w)]

            return fn, [x]

        assert _check_layer(build) < 1e-6


class TestBlockGradients:
    def test_self_attention_block(self):
        def build(store, rng):
            blk = nn.SelfAttentionBlock(store, "blk", 6, 2, rng, zero_out=False)
            x = rng.standard_normal((2, 3, 6))
            w = rng.standard_normal((2, 3, 6))

            def fn(x):
                y = blk.forward(x)
                return _weighted_loss(y, w), [blk.backward(w)]

            return fn, [x]

        assert _check_layer(build) < 1e-4

    def test_cross_attention_block(self):
        def build(store, rng):
            blk = nn.CrossAttentionBlock(store, "blk", 6, 4, 2, rng, zero_out=False)
            x = rng.standard_normal((3, 6))
            kv = rng.standard_normal((5, 4))
            w = rng.standard_normal((3, 6))

            def fn(x, kv):
                y = blk.forward(x, kv)
                dx, dkv = blk.backward(w)
                return _weighted_loss(y, w), [dx, dkv]

            return fn, [x, kv]

        assert _check_layer(build) < 1e-4

    def test_feed_forward(self):
        def build(store, rng):
            blk = nn.FeedForward(store, "ffn", 5, 9, rng)
            store["ffn.down.weight"].value[...] = rng.standard_normal((9, 5)) * 0.3
            x = rng.standard_normal((4, 5))
            w = rng.standard_normal((4, 5))

            def fn(x):
                y = blk.forward(x)
                return _weighted_loss(y, w), [blk.backward(w)]

            return fn, [x]

        assert _check_layer(build) < 1e-4


def test_non_finite_loss_aborts():
    store = nn.ParamStore()

    def fn():
        return float("nan"), []

    with pytest.raises(nn.GradCheckError, match="non-finite"):
        nn.grad_check(fn, store)


def test_frozen_parameter_buffer_stays_zero():
    with nn.using_dtype(np.float64):
        rng = np.random.default_rng(0)
        store = nn.ParamStore()
        lin = nn.Linear(store, "lin", 3, 3, rng)
        store["lin.weight"].frozen = True
        x = rng.standard_normal((2, 3))

        def fn(x):
            y = lin.forward(x)
            return _weighted_loss(y, np.ones_like(y)), [lin.backward(np.ones_like(y))]

        nn.grad_check(fn, store, [x])
        assert np.all(store["lin.weight"].grad == 0.0)
