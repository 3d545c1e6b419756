"""Exact invertible latent codec: space-to-depth plus a fixed orthogonal mix.

Stands in for a learned VAE. Per frame, P x P pixel patches are flattened
to channel vectors and mixed by a seeded orthogonal matrix; decode applies
the transpose. With ratio 1.0 the round trip is lossless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ConfigError, ShapeError


@dataclass(frozen=True)
class CodecConfig:
    patch: int = 4
    seed: int = 0
    ratio: float = 1.0
    mixing: str = "orthogonal"  # or "identity"

    @property
    def patch_dim(self) -> int:
        return 3 * self.patch * self.patch

    @property
    def latent_channels(self) -> int:
        c = int(round(self.patch_dim * self.ratio))
        if not 1 <= c <= self.patch_dim:
            raise ConfigError(f"retained-channel ratio {self.ratio} out of range")
        return c


def _mixing_matrix(cfg: CodecConfig) -> np.ndarray:
    d = cfg.patch_dim
    if cfg.mixing == "identity":
        return np.eye(d)
    rng = np.random.default_rng(cfg.seed)
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    q *= np.sign(np.diag(r))  # sign-fix so the matrix is reproducible
    return q


class LatentCodec:
    """Stateless pixel <-> latent transform; safe for concurrent use."""

    def __init__(self, cfg: CodecConfig = CodecConfig()):
        self.cfg = cfg
        self.mix = _mixing_matrix(cfg)  # float64 (patch_dim, patch_dim)

    def encode(self, video: np.ndarray) -> np.ndarray:
        """(N, 3, H, W) pixels in [-1, 1] -> (N, c, H/P, W/P) latents."""
        video = np.asarray(video)
        if video.ndim != 4 or video.shape[1] != 3:
            raise ShapeError(f"expected (N, 3, H, W) pixel video, got {video.shape}")
        n, _, hh, ww = video.shape
        p = self.cfg.patch
        if hh % p or ww % p:
            raise ConfigError(f"spatial extents {hh}x{ww} not divisible by patch {p}")
        h, w = hh // p, ww // p
        patches = video.reshape(n, 3, h, p, w, p).transpose(0, 2, 4, 1, 3, 5)
        flat = patches.reshape(n, h * w, self.cfg.patch_dim)
        mix = self.mix[:, : self.cfg.latent_channels].astype(video.dtype)
        z = flat @ mix
        return z.reshape(n, h, w, -1).transpose(0, 3, 1, 2)

    def decode(self, latents: np.ndarray) -> np.ndarray:
        """(N, c, h, w) latents -> (N, 3, h*P, w*P) pixels."""
        latents = np.asarray(latents)
        c = self.cfg.latent_channels
        if latents.ndim != 4 or latents.shape[1] != c:
            raise ShapeError(f"expected (N, {c}, h, w) latents, got {latents.shape}")
        n, _, h, w = latents.shape
        p = self.cfg.patch
        mix = self.mix[:, :c].astype(latents.dtype)
        flat = latents.transpose(0, 2, 3, 1).reshape(n, h * w, c) @ mix.T
        patches = flat.reshape(n, h, w, 3, p, p).transpose(0, 3, 1, 4, 2, 5)
        return patches.reshape(n, 3, h * p, w * p)
