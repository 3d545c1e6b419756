"""Pre-norm residual transformer blocks built from the layer kernels.

Residual branches end in zero-initialized projections, so every block is
an exact identity at initialization and training starts from the frozen
backbone's behaviour.
"""

from __future__ import annotations

import numpy as np

from .core import ConfigError, ParamStore
from .layers import Attention, Gelu, LayerNorm, Linear


def split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, t, c = x.shape
    if c % heads:
        raise ConfigError(f"width {c} not divisible by {heads} heads")
    return x.reshape(*lead, t, heads, c // heads).swapaxes(-3, -2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    y = x.swapaxes(-3, -2)
    *lead, t, h, d = y.shape
    return y.reshape(*lead, t, h * d)


class SelfAttentionBlock:
    """x + W_o MHA(LN(x)) with multi-head self-attention."""

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator, zero_out: bool = True):
        self.heads = heads
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        self.wq = Linear(store, f"{name}.q", dim, dim, rng, bias=False)
        self.wk = Linear(store, f"{name}.k", dim, dim, rng, bias=False)
        self.wv = Linear(store, f"{name}.v", dim, dim, rng, bias=False)
        self.wo = Linear(store, f"{name}.out", dim, dim, rng, bias=False, zero_init=zero_out)
        self.attn = Attention()

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = self.norm.forward(x)
        a = self.attn.forward(
            split_heads(self.wq.forward(h), self.heads),
            split_heads(self.wk.forward(h), self.heads),
            split_heads(self.wv.forward(h), self.heads),
        )
        return x + self.wo.forward(merge_heads(a))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        da = split_heads(self.wo.backward(dy), self.heads)
        dq, dk, dv = self.attn.backward(da)
        dh = self.wq.backward(merge_heads(dq))
        dh += self.wk.backward(merge_heads(dk))
        dh += self.wv.backward(merge_heads(dv))
        return dy + self.norm.backward(dh)


class CrossAttentionBlock:
    """x + W_o MHA(LN(x), kv); keys and values come from an external bank."""

    def __init__(self, store: ParamStore, name: str, dim: int, kv_dim: int, heads: int,
                 rng: np.random.Generator, zero_out: bool = True):
        self.heads = heads
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        self.wq = Linear(store, f"{name}.q", dim, dim, rng, bias=False)
        self.wk = Linear(store, f"{name}.k", kv_dim, dim, rng, bias=False)
        self.wv = Linear(store, f"{name}.v", kv_dim, dim, rng, bias=False)
        self.wo = Linear(store, f"{name}.out", dim, dim, rng, bias=False, zero_init=zero_out)
        self.attn = Attention()

    def forward(self, x: np.ndarray, kv: np.ndarray) -> np.ndarray:
        h = self.norm.forward(x)
        a = self.attn.forward(
            split_heads(self.wq.forward(h), self.heads),
            split_heads(self.wk.forward(kv), self.heads),
            split_heads(self.wv.forward(kv), self.heads),
        )
        return x + self.wo.forward(merge_heads(a))

    def backward(self, dy: np.ndarray):
        da = split_heads(self.wo.backward(dy), self.heads)
        dq, dk, dv = self.attn.backward(da)
        dkv = self.wk.backward(merge_heads(dk)) + self.wv.backward(merge_heads(dv))
        dx = dy + self.norm.backward(self.wq.backward(merge_heads(dq)))
        return dx, dkv


class FeedForward:
    """x + W2 GELU(W1 LN(x)), W2 zero-initialized."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int,
                 rng: np.random.Generator):
        self.norm = LayerNorm(store, f"{name}.norm", dim)
        self.w1 = Linear(store, f"{name}.up", dim, hidden, rng)
        self.act = Gelu()
        self.w2 = Linear(store, f"{name}.down", hidden, dim, rng, zero_init=True)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x + self.w2.forward(self.act.forward(self.w1.forward(self.norm.forward(x))))

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dh = self.w1.backward(self.act.backward(self.w2.backward(dy)))
        return dy + self.norm.backward(dh)
