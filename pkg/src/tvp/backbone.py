"""Spatio-temporal denoising backbone with three bolt-on adapter types.

The base network (prefix ``base.``) is a two-level UNet over per-frame
latents: residual conv blocks with noise-level conditioning, plus one
attention stack per level (spatial self-attention, temporal
self-attention, per-frame cross-attention into the condition bank).
Adapters (``adapter.``) and cross-attention (``xattn.``) are the only
parts trained during transfer; their output projections start at zero so
enabling them does not move the frozen model.

All forwards take a leading batch axis: inputs are
(batch, frames, channels, h, w).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import (
    ConfigError,
    Conv2d,
    CrossAttentionBlock,
    DepthwiseConv3d,
    Gelu,
    LayerNorm,
    NearestUpsample2x,
    ParamStore,
    SelfAttentionBlock,
    ShapeError,
)
from .nn.layers import Attention, Linear


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 48
    width: int = 48            # level-0 width; level 1 doubles it
    frames: int = 8
    heads: int = 4
    cond_width: int = 32
    adapter_div: int = 4       # bottleneck = level width // adapter_div
    sigma_features: int = 32
    sigma_dim: int = 64

    @property
    def input_channels(self) -> int:
        return 2 * self.latent_channels + 1


@dataclass(frozen=True)
class AdapterFlags:
    spatial: bool = True
    short: bool = True
    long: bool = True

    @classmethod
    def none(cls) -> "AdapterFlags":
        return cls(False, False, False)

    def any(self) -> bool:
        return self.spatial or self.short or self.long


def assemble_input(noisy: np.ndarray, cond: np.ndarray, k: int) -> np.ndarray:
    """Channel-concat noisy latents, reference latents, and the frame mask.

    Per-sample layout (frames, channels, h, w). Condition channels are
    zeroed on frames >= k; the mask channel is 1.0 exactly on frames < k.
    """
    if noisy.shape != cond.shape:
        raise ShapeError(f"noisy {noisy.shape} and condition {cond.shape} latents disagree")
    n = noisy.shape[0]
    if not 1 <= k < n:
        raise ShapeError(f"reference frame count k={k} must satisfy 1 <= k < {n}")
    cond = cond.copy()
    cond[k:] = 0.0
    mask = np.zeros((n, 1) + noisy.shape[2:], dtype=noisy.dtype)
    mask[:k] = 1.0
    return np.concatenate([noisy, cond, mask], axis=1)


def sinusoidal_features(values: np.ndarray, dim: int, max_period: float = 1e4) -> np.ndarray:
    """(B,) scalars -> (B, dim) sin/cos features."""
    values = np.atleast_1d(np.asarray(values))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = values[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class ChannelNorm:
    """LayerNorm over the channel axis of NCHW maps."""

    def __init__(self, store: ParamStore, name: str, channels: int):
        self.ln = LayerNorm(store, name, channels)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.ln.forward(x.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return self.ln.backward(dy.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)


# -- adapters -----------------------------------------------------------------

ADAPTER_INIT_SCALE = 0.02


class SpatialAdapter:
    """x + W_up GELU(W_down x) on (..., tokens, C); runs beside spatial attention."""

    def __init__(self, store: ParamStore, name: str, dim: int, bottleneck: int,
                 rng: np.random.Generator):
        self.down = Linear(store, f"{name}.down", dim, bottleneck, rng, scale=ADAPTER_INIT_SCALE)
        self.act = Gelu()
        self.up = Linear(store, f"{name}.up", bottleneck, dim, rng, zero_init=True)

    def inner(self, x: np.ndarray) -> np.ndarray:
        return self.up.forward(self.act.forward(self.down.forward(x)))

    def inner_backward(self, dy: np.ndarray) -> np.ndarray:
        return self.down.backward(self.act.backward(self.up.backward(dy)))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x + self.inner(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy + self.inner_backward(dy)


class ShortTermAdapter:
    """x + W_up DWConv3d(W_down x) on (..., C, frames, h, w); kernel spans time."""

    def __init__(self, store: ParamStore, name: str, dim: int, bottleneck: int,
                 rng: np.random.Generator, kernel: tuple[int, int, int] = (3, 1, 1)):
        self.down = Linear(store, f"{name}.down", dim, bottleneck, rng, scale=ADAPTER_INIT_SCALE)
        self.conv = DepthwiseConv3d(store, f"{name}.conv", bottleneck, kernel, rng, init="delta")
        self.up = Linear(store, f"{name}.up", bottleneck, dim, rng, zero_init=True)

    def inner(self, x: np.ndarray) -> np.ndarray:
        h = self.down.forward(np.moveaxis(x, -4, -1))   # (..., N, h, w, db)
        h = self.conv.forward(np.moveaxis(h, -1, -4))   # (..., db, N, h, w)
        h = self.up.forward(np.moveaxis(h, -4, -1))     # (..., N, h, w, C)
        return np.moveaxis(h, -1, -4)

    def inner_backward(self, dy: np.ndarray) -> np.ndarray:
        d = self.up.backward(np.moveaxis(dy, -4, -1))
        d = self.conv.backward(np.moveaxis(d, -1, -4))
        d = self.down.backward(np.moveaxis(d, -4, -1))
        return np.moveaxis(d, -1, -4)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x + self.inner(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy + self.inner_backward(dy)


class LongTermAdapter:
    """x + W_up SelfAttn_time(W_down x) on (..., tokens, frames, C)."""

    def __init__(self, store: ParamStore, name: str, dim: int, bottleneck: int,
                 rng: np.random.Generator):
        self.down = Linear(store, f"{name}.down", dim, bottleneck, rng, scale=ADAPTER_INIT_SCALE)
        self.wq = Linear(store, f"{name}.q", bottleneck, bottleneck, rng, bias=False)
        self.wk = Linear(store, f"{name}.k", bottleneck, bottleneck, rng, bias=False)
        self.wv = Linear(store, f"{name}.v", bottleneck, bottleneck, rng, bias=False)
        self.attn = Attention()
        self.up = Linear(store, f"{name}.up", bottleneck, dim, rng, zero_init=True)

    def inner(self, x: np.ndarray) -> np.ndarray:
        h = self.down.forward(x)
        a = self.attn.forward(self.wq.forward(h), self.wk.forward(h), self.wv.forward(h))
        return self.up.forward(a)

    def inner_backward(self, dy: np.ndarray) -> np.ndarray:
        da = self.up.backward(dy)
        dq, dk, dv = self.attn.backward(da)
        dh = self.wq.backward(dq) + self.wk.backward(dk) + self.wv.backward(dv)
        return self.down.backward(dh)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x + self.inner(x)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy + self.inner_backward(dy)


class AdapterSet:
    """The three adapters attached to one attention stack."""

    def __init__(self, store: ParamStore, name: str, dim: int, bottleneck: int,
                 rng: np.random.Generator):
        self.spatial = SpatialAdapter(store, f"{name}.spatial", dim, bottleneck, rng)
        self.short = ShortTermAdapter(store, f"{name}.short", dim, bottleneck, rng)
        self.long = LongTermAdapter(store, f"{name}.long", dim, bottleneck, rng)


# -- backbone blocks -----------------------------------------------------------

class ResBlock:
    """Two-conv residual block with additive noise-level conditioning.

    Operates on (batch*frames, C, h, w); `semb` is one row per batch item
    and broadcasts over that item's frames.
    """

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int,
                 sigma_dim: int, rng: np.random.Generator):
        self.norm1 = ChannelNorm(store, f"{name}.norm1", c_in)
        self.act1 = Gelu()
        self.conv1 = Conv2d(store, f"{name}.conv1", c_in, c_out, 3, rng=rng)
        self.sigma_proj = Linear(store, f"{name}.sigma", sigma_dim, c_out, rng)
        self.norm2 = ChannelNorm(store, f"{name}.norm2", c_out)
        self.act2 = Gelu()
        self.conv2 = Conv2d(store, f"{name}.conv2", c_out, c_out, 3, rng=rng, zero_init=True)
        self.skip = Conv2d(store, f"{name}.skip", c_in, c_out, 1, rng=rng) if c_in != c_out else None

    def forward(self, x: np.ndarray, semb: np.ndarray, frames: int) -> np.ndarray:
        self._frames = frames
        h = self.conv1.forward(self.act1.forward(self.norm1.forward(x)))
        h = h + np.repeat(self.sigma_proj.forward(semb), frames, axis=0)[:, :, None, None]
        h = self.conv2.forward(self.act2.forward(self.norm2.forward(h)))
        base = self.skip.forward(x) if self.skip is not None else x
        return base + h

    def backward(self, dy: np.ndarray):
        dh = self.norm2.backward(self.act2.backward(self.conv2.backward(dy)))
        per_frame = dh.sum(axis=(2, 3))
        b = per_frame.shape[0] // self._frames
        d_semb = self.sigma_proj.backward(
            per_frame.reshape(b, self._frames, -1).sum(axis=1)
        )
        dx = self.norm1.backward(self.act1.backward(self.conv1.backward(dh)))
        dx += self.skip.backward(dy) if self.skip is not None else dy
        return dx, d_semb


class AttentionStack:
    """Spatial attention (+parallel spatial adapter), temporal attention
    (+short/long adapters), then per-frame cross-attention into the
    condition bank. Input (batch*frames, C, h, w)."""

    def __init__(self, store: ParamStore, name: str, dim: int, cfg: BackboneConfig,
                 rng: np.random.Generator, with_xattn: bool, with_adapters: bool):
        self.spatial = SelfAttentionBlock(store, f"base.{name}.spatial", dim, cfg.heads, rng)
        self.temporal = SelfAttentionBlock(store, f"base.{name}.temporal", dim, cfg.heads, rng)
        self.cross = (
            CrossAttentionBlock(store, f"xattn.{name}", dim, cfg.cond_width, cfg.heads, rng)
            if with_xattn else None
        )
        self.adapters = (
            AdapterSet(store, f"adapter.{name}", dim, max(1, dim // cfg.adapter_div), rng)
            if with_adapters else None
        )

    def forward(self, x: np.ndarray, kv: np.ndarray | None, flags: AdapterFlags,
                frames: int) -> np.ndarray:
        if flags.any() and self.adapters is None:
            raise ConfigError("adapter flags enabled but no adapters were built")
        bn, c, h, w = x.shape
        b = bn // frames
        self._dims = (b, frames, c, h, w)
        t0 = x.reshape(b, frames, c, h * w).transpose(0, 1, 3, 2)   # (B, N, hw, C)
        t1 = self.spatial.forward(t0)
        if flags.spatial:
            t1 = t1 + self.adapters.spatial.inner(t0)
        tt = self.temporal.forward(t1.transpose(0, 2, 1, 3))        # (B, hw, N, C)
        if flags.short:
            cv = self.adapters.short.forward(tt.transpose(0, 3, 2, 1).reshape(b, c, frames, h, w))
            tt = cv.reshape(b, c, frames, h * w).transpose(0, 3, 2, 1)
        if flags.long:
            tt = self.adapters.long.forward(tt)
        t2 = tt.transpose(0, 2, 1, 3)                               # (B, N, hw, C)
        self._kv_used = kv is not None and self.cross is not None
        if self._kv_used:
            t2 = self.cross.forward(t2, kv)
        self._flags = flags
        return t2.transpose(0, 1, 3, 2).reshape(bn, c, h, w)

    def backward(self, dy: np.ndarray):
        b, frames, c, h, w = self._dims
        flags = self._flags
        dt2 = dy.reshape(b, frames, c, h * w).transpose(0, 1, 3, 2)
        d_kv = None
        if self._kv_used:
            dt2, d_kv = self.cross.backward(dt2)
        dtt = dt2.transpose(0, 2, 1, 3)
        if flags.long:
            dtt = self.adapters.long.backward(dtt)
        if flags.short:
            dcv = self.adapters.short.backward(dtt.transpose(0, 3, 2, 1).reshape(b, c, frames, h, w))
            dtt = dcv.reshape(b, c, frames, h * w).transpose(0, 3, 2, 1)
        dt1 = self.temporal.backward(dtt).transpose(0, 2, 1, 3)
        dt0 = self.spatial.backward(dt1)
        if flags.spatial:
            dt0 = dt0 + self.adapters.spatial.inner_backward(dt1)
        return dt0.transpose(0, 1, 3, 2).reshape(b * frames, c, h, w), d_kv


class UNet:
    """Two-level denoising UNet over (batch, frames, channels, h, w) latents."""

    def __init__(self, store: ParamStore, cfg: BackboneConfig, rng: np.random.Generator,
                 with_xattn: bool = True, with_adapters: bool = True):
        self.cfg = cfg
        w0, w1 = cfg.width, 2 * cfg.width
        self.in_conv = Conv2d(store, "base.in_conv", cfg.input_channels, w0, 3, rng=rng)
        self.enc0 = ResBlock(store, "base.enc0", w0, w0, cfg.sigma_dim, rng)
        self.down1 = Conv2d(store, "base.down1", w0, w1, 3, stride=2, rng=rng)
        self.enc1 = ResBlock(store, "base.enc1", w1, w1, cfg.sigma_dim, rng)
        self.stack1 = AttentionStack(store, "stack1", w1, cfg, rng, with_xattn, with_adapters)
        self.upsample = NearestUpsample2x()
        self.up0 = Conv2d(store, "base.up0", w1, w0, 3, rng=rng)
        self.dec0 = ResBlock(store, "base.dec0", 2 * w0, w0, cfg.sigma_dim, rng)
        self.stack0 = AttentionStack(store, "stack0", w0, cfg, rng, with_xattn, with_adapters)
        self.out_norm = ChannelNorm(store, "base.out_norm", w0)
        self.out_act = Gelu()
        self.out_conv = Conv2d(store, "base.out_conv", w0, cfg.latent_channels, 3,
                               rng=rng, zero_init=True)
        self.sig1 = Linear(store, "base.sigma_mlp.fc1", cfg.sigma_features, cfg.sigma_dim, rng)
        self.sig_act = Gelu()
        self.sig2 = Linear(store, "base.sigma_mlp.fc2", cfg.sigma_dim, cfg.sigma_dim, rng)
        self.has_adapters = with_adapters

    def default_flags(self) -> AdapterFlags:
        return AdapterFlags() if self.has_adapters else AdapterFlags.none()

    def forward(self, inp: np.ndarray, cnoise: np.ndarray, kv: np.ndarray | None = None,
                flags: AdapterFlags | None = None) -> np.ndarray:
        """inp (B, N, 2c+1, h, w), cnoise (B,), kv (B, N, L, cond_width) or None."""
        if inp.ndim != 5 or inp.shape[2] != self.cfg.input_channels:
            raise ShapeError(
                f"unet expects (B, N, {self.cfg.input_channels}, h, w) input, got {inp.shape}"
            )
        flags = self.default_flags() if flags is None else flags
        b, n, ch, h, w = inp.shape
        self._bn = (b, n, h, w)
        feats = sinusoidal_features(cnoise, self.cfg.sigma_features).astype(inp.dtype)
        semb = self.sig2.forward(self.sig_act.forward(self.sig1.forward(feats)))
        x = inp.reshape(b * n, ch, h, w)
        h0 = self.in_conv.forward(x)
        a0 = self.enc0.forward(h0, semb, n)
        a1 = self.enc1.forward(self.down1.forward(a0), semb, n)
        a1 = self.stack1.forward(a1, kv, flags, n)
        u0 = self.up0.forward(self.upsample.forward(a1))
        b0 = self.dec0.forward(np.concatenate([u0, a0], axis=1), semb, n)
        b0 = self.stack0.forward(b0, kv, flags, n)
        out = self.out_conv.forward(self.out_act.forward(self.out_norm.forward(b0)))
        return out.reshape(b, n, self.cfg.latent_channels, h, w)

    def backward(self, dy: np.ndarray):
        """Returns (d_input, d_kv); parameter grads accumulate in the store."""
        b, n, h, w = self._bn
        dy = dy.reshape(b * n, self.cfg.latent_channels, h, w)
        db0 = self.out_norm.backward(self.out_act.backward(self.out_conv.backward(dy)))
        db0, d_kv0 = self.stack0.backward(db0)
        dcat, ds_dec = self.dec0.backward(db0)
        w0 = self.cfg.width
        du0, da0_skip = dcat[:, :w0], dcat[:, w0:]
        da1 = self.upsample.backward(self.up0.backward(du0))
        da1, d_kv1 = self.stack1.backward(da1)
        da1, ds_enc1 = self.enc1.backward(da1)
        da0 = self.down1.backward(da1) + da0_skip
        dh0, ds_enc0 = self.enc0.backward(da0)
        d_inp = self.in_conv.backward(dh0)
        d_semb = ds_dec + ds_enc1 + ds_enc0
        self.sig1.backward(self.sig_act.backward(self.sig2.backward(d_semb)))
        d_kv = None
        for g in (d_kv0, d_kv1):
            if g is not None:
                d_kv = g if d_kv is None else d_kv + g
        ch = self.cfg.input_channels
        return d_inp.reshape(b, n, ch, h, w), d_kv
