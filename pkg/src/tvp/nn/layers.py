"""Neural layers with explicit forward and reverse-mode backward.

Every layer caches what its backward needs on the instance, so a given
instance handles one forward/backward pair at a time. The layer set is
small and closed; composites chain these backwards by hand in reverse
order instead of relying on a recording tape.
"""

from __future__ import annotations

import math

import numpy as np

from .core import ConfigError, ParamStore, Parameter, ShapeError, default_dtype

GELU_COEF = 0.044715
SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def gauss_init(rng: np.random.Generator, shape, scale: float = 0.02) -> np.ndarray:
    return (rng.standard_normal(shape) * scale).astype(default_dtype())


class Linear:
    """Affine map on the last axis: y = x W + b."""

    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator | None = None, bias: bool = True,
                 zero_init: bool = False, scale: float | None = None):
        if zero_init:
            w = np.zeros((d_in, d_out), dtype=default_dtype())
        else:
            s = scale if scale is not None else 1.0 / math.sqrt(d_in)
            w = (rng.standard_normal((d_in, d_out)) * s).astype(default_dtype())
        self.W = store.add(f"{name}.weight", w)
        self.b = store.add(f"{name}.bias", np.zeros(d_out, dtype=default_dtype())) if bias else None
        self._x2 = None
        self._lead = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        d_in = self.W.value.shape[0]
        if x.shape[-1] != d_in:
            raise ShapeError(
                f"linear {self.W.name}: input inner extent {x.shape} does not match weight {self.W.value.shape}"
            )
        self._lead = x.shape[:-1]
        self._x2 = x.reshape(-1, d_in)
        y = self._x2 @ self.W.value
        if self.b is not None:
            y = y + self.b.value
        return y.reshape(*self._lead, -1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dy2 = dy.reshape(-1, self.W.value.shape[1])
        self.W.accumulate(self._x2.T @ dy2)
        if self.b is not None:
            self.b.accumulate(dy2.sum(axis=0))
        dx = dy2 @ self.W.value.T
        return dx.reshape(*self._lead, -1)


class Gelu:
    """Elementwise GELU, tanh approximation."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        x2 = x * x
        self._t = np.tanh(SQRT_2_OVER_PI * (x + GELU_COEF * x2 * x))
        return 0.5 * x * (1.0 + self._t)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        x, t = self._x, self._t
        du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
        return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


class Attention:
    """Scaled dot-product attention: softmax(Q K^T * scale) V.

    Supports arbitrary leading batch axes; the softmax runs over the key
    axis, so every output row is a convex combination of value rows.
    """

    def __init__(self, scale: float | None = None):
        self.scale = scale

    def forward(self, q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
        if k.shape[-2] == 0:
            raise ShapeError("attention requires at least one key row")
        if k.shape[-2] != v.shape[-2]:
            raise ShapeError(f"key rows {k.shape} != value rows {v.shape}")
        if q.shape[-1] != k.shape[-1]:
            raise ShapeError(f"query width {q.shape} != key width {k.shape}")
        scale = self.scale if self.scale is not None else 1.0 / math.sqrt(q.shape[-1])
        logits = (q @ k.swapaxes(-1, -2)) * scale
        logits -= logits.max(axis=-1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=-1, keepdims=True)
        self._q, self._k, self._v, self._p, self._scale = q, k, v, p, scale
        return p @ v

    def backward(self, dy: np.ndarray):
        q, k, v, p, scale = self._q, self._k, self._v, self._p, self._scale
        dv = p.swapaxes(-1, -2) @ dy
        dp = dy @ v.swapaxes(-1, -2)
        dlogits = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = (dlogits @ k) * scale
        dk = (dlogits.swapaxes(-1, -2) @ q) * scale
        return dq, dk, dv


class LayerNorm:
    """Standardize the last axis, then apply a learned affine."""

    def __init__(self, store: ParamStore, name: str, d: int, eps: float = 1e-5):
        if d < 1:
            raise ConfigError("layer_norm needs at least one feature")
        self.gain = store.add(f"{name}.gain", np.ones(d, dtype=default_dtype()))
        self.bias = store.add(f"{name}.bias", np.zeros(d, dtype=default_dtype()))
        self.eps = eps

    def forward(self, x: np.ndarray) -> np.ndarray:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = xc * self._inv
        return self.gain.value * self._xhat + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        xhat, inv = self._xhat, self._inv
        lead = tuple(range(dy.ndim - 1))
        self.gain.accumulate((dy * xhat).sum(axis=lead))
        self.bias.accumulate(dy.sum(axis=lead))
        dxhat = dy * self.gain.value
        return inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )


class Conv2d:
    """2D convolution, NCHW, zero padding, odd kernel, optional stride.

    Runs as one GEMM over gathered patch columns; backward scatters the
    column gradient back through the same gather.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 k: int = 3, stride: int = 1, rng: np.random.Generator | None = None,
                 zero_init: bool = False, bias: bool = True):
        if k % 2 == 0:
            raise ConfigError(f"conv kernel extent must be odd, got {k}")
        self.k, self.stride, self.pad = k, stride, k // 2
        if zero_init:
            w = np.zeros((c_out, c_in, k, k), dtype=default_dtype())
        else:
            s = 1.0 / math.sqrt(c_in * k * k)
            w = (rng.standard_normal((c_out, c_in, k, k)) * s).astype(default_dtype())
        self.W = store.add(f"{name}.weight", w)
        self.b = store.add(f"{name}.bias", np.zeros(c_out, dtype=default_dtype())) if bias else None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.W.value.shape[1]:
            raise ShapeError(f"conv {self.W.name}: input channels {x.shape} != weight {self.W.value.shape}")
        b, c, h, w = x.shape
        p, s, k = self.pad, self.stride, self.k
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
        col = windows[:, :, ::s, ::s].transpose(0, 2, 3, 1, 4, 5).reshape(b * ho * wo, c * k * k)
        wmat = self.W.value.reshape(self.W.value.shape[0], -1)
        y = col @ wmat.T
        if self.b is not None:
            y = y + self.b.value
        self._col, self._xshape, self._oshape = col, x.shape, (ho, wo)
        return y.reshape(b, ho, wo, -1).transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, c, h, w = self._xshape
        ho, wo = self._oshape
        p, s, k = self.pad, self.stride, self.k
        c_out = self.W.value.shape[0]
        dy_cols = dy.transpose(0, 2, 3, 1).reshape(b * ho * wo, c_out)
        self.W.accumulate((dy_cols.T @ self._col).reshape(self.W.value.shape))
        if self.b is not None:
            self.b.accumulate(dy_cols.sum(axis=0))
        dcol = (dy_cols @ self.W.value.reshape(c_out, -1)).reshape(b, ho, wo, c, k, k)
        dxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=dy.dtype)
        for di in range(k):
            for dj in range(k):
                si = slice(di, di + s * (ho - 1) + 1, s)
                sj = slice(dj, dj + s * (wo - 1) + 1, s)
                dxp[:, :, si, sj] += dcol[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        return dxp[:, :, p : p + h, p : p + w]


class DepthwiseConv3d:
    """Per-channel 3D convolution over (time, height, width), shape-preserving.

    Input layout (..., C, T, H, W) with optional leading batch axes;
    channel c is convolved only with kernel c.
    """

    def __init__(self, store: ParamStore, name: str, channels: int,
                 kernel: tuple[int, int, int] = (3, 1, 1),
                 rng: np.random.Generator | None = None, init: str = "gauss"):
        kt, kh, kw = kernel
        if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"depthwise kernel extents must be odd, got {kernel}")
        self.kernel = kernel
        if init == "delta":
            w = np.zeros((channels, kt, kh, kw), dtype=default_dtype())
            w[:, kt // 2, kh // 2, kw // 2] = 1.0
        else:
            w = gauss_init(rng, (channels, kt, kh, kw))
        self.K = store.add(f"{name}.kernel", w)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-4] != self.K.value.shape[0]:
            raise ShapeError(f"depthwise {self.K.name}: channels {x.shape} != kernels {self.K.value.shape}")
        kt, kh, kw = self.kernel
        t, h, w = x.shape[-3:]
        pad = [(0, 0)] * (x.ndim - 3) + [(kt // 2, kt // 2), (kh // 2, kh // 2), (kw // 2, kw // 2)]
        xp = np.pad(x, pad)
        out = np.zeros_like(x)
        for a in range(kt):
            for bb in range(kh):
                for cc in range(kw):
                    out += self.K.value[:, a, bb, cc][:, None, None, None] * xp[..., a : a + t, bb : bb + h, cc : cc + w]
        self._xp, self._shape = xp, x.shape
        return out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        kt, kh, kw = self.kernel
        t, h, w = self._shape[-3:]
        xp = self._xp
        dK = np.zeros_like(self.K.value)
        dxp = np.zeros_like(xp)
        sum_axes = tuple(i for i in range(dy.ndim) if i != dy.ndim - 4)
        for a in range(kt):
            for bb in range(kh):
                for cc in range(kw):
                    sl = (Ellipsis, slice(a, a + t), slice(bb, bb + h), slice(cc, cc + w))
                    dK[:, a, bb, cc] = (dy * xp[sl]).sum(axis=sum_axes)
                    dxp[sl] += self.K.value[:, a, bb, cc][:, None, None, None] * dy
        self.K.accumulate(dK)
        return dxp[..., kt // 2 : kt // 2 + t, kh // 2 : kh // 2 + h, kw // 2 : kw // 2 + w]


class Embedding:
    """Token id lookup table."""

    def __init__(self, store: ParamStore, name: str, vocab: int, dim: int,
                 rng: np.random.Generator):
        self.table = store.add(f"{name}.table", gauss_init(rng, (vocab, dim)))

    def forward(self, ids: np.ndarray) -> np.ndarray:
        self._ids = np.asarray(ids)
        return self.table.value[self._ids]

    def backward(self, dy: np.ndarray) -> None:
        g = np.zeros_like(self.table.value)
        np.add.at(g, self._ids, dy)
        self.table.accumulate(g)


class NearestUpsample2x:
    """Nearest-neighbour 2x spatial upsample on NCHW."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape
        return dy.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))


# -- functional forms for the bare operations --------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input inner extent {x.shape} does not match weight {w.shape}")
    y = x @ w
    return y if b is None else y + b


def gelu(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    return 0.5 * x * (1.0 + np.tanh(SQRT_2_OVER_PI * (x + GELU_COEF * x**3)))


def attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, scale: float | None = None) -> np.ndarray:
    return Attention(scale).forward(q, k, v)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return gain * (xc / np.sqrt(var + eps)) + bias


def depthwise_conv3d(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    store = ParamStore()
    layer = DepthwiseConv3d.__new__(DepthwiseConv3d)
    kt, kh, kw = kernels.shape[1:]
    if kt % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ConfigError(f"depthwise kernel extents must be odd, got {kernels.shape[1:]}")
    layer.kernel = (kt, kh, kw)
    layer.K = Parameter("k", kernels)
    return layer.forward(x)
