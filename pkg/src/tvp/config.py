"""Run configuration shared by the CLI, trainer, and checkpoint format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .backbone import AdapterFlags, BackboneConfig
from .codec import CodecConfig
from .conditioning import ConditioningConfig
from .diffusion import GuidanceScales, SamplerConfig, SigmaSampler
from .nn import ConfigError


@dataclass(frozen=True)
class RunConfig:
    # data and codec
    frames: int = 8
    ref_frames: int = 2
    canvas: int = 32
    patch: int = 4
    codec_seed: int = 0
    codec_ratio: float = 1.0
    # conditioning
    cond_width: int = 32
    text_len: int = 16
    vis_patch: int = 8
    queries_per_frame: int = 8
    cond_heads: int = 4
    vocab: int = 256
    dq_depth: int = 1
    ffn_hidden: int = 64
    # backbone
    width: int = 48
    heads: int = 4
    adapter_div: int = 4
    sigma_features: int = 32
    sigma_dim: int = 64
    # diffusion
    sigma_data: float = 0.5
    latent_scale: float = 4.5   # brings shape-corpus latent std up to sigma_data
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    steps: int = 25
    s_v: float = 1.0
    s_t: float = 5.0
    # training
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    train_steps: int = 2000
    batch_size: int = 4
    p_drop_t: float = 0.1
    p_drop_v: float = 0.1
    seed: int = 0
    ckpt_every: int = 500
    # ablation switches
    no_mc: bool = False
    no_de: bool = False
    no_me: bool = False
    no_llava: bool = False
    no_adapter: bool = False
    no_sa: bool = False
    no_sta: bool = False
    no_lta: bool = False
    no_ta: bool = False

    def normalized(self) -> "RunConfig":
        """Apply flag implications and validate ranges."""
        cfg = self
        if cfg.no_mc and not (cfg.no_de and cfg.no_me):
            cfg = replace(cfg, no_de=True, no_me=True)
        if cfg.no_de and cfg.no_me and not cfg.no_mc:
            cfg = replace(cfg, no_mc=True)
        for name in ("p_drop_t", "p_drop_v"):
            v = getattr(cfg, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} must be a probability")
        if not 1 <= cfg.ref_frames < cfg.frames:
            raise ConfigError(f"ref_frames={cfg.ref_frames} must satisfy 1 <= k < frames={cfg.frames}")
        if cfg.canvas % cfg.patch:
            raise ConfigError(f"canvas {cfg.canvas} not divisible by codec patch {cfg.patch}")
        return cfg

    @property
    def latent_channels(self) -> int:
        return self.codec_config().latent_channels

    @property
    def latent_hw(self) -> int:
        return self.canvas // self.patch

    def codec_config(self) -> CodecConfig:
        return CodecConfig(patch=self.patch, seed=self.codec_seed, ratio=self.codec_ratio)

    def conditioning_config(self) -> ConditioningConfig:
        return ConditioningConfig(
            width=self.cond_width, text_len=self.text_len, vis_patch=self.vis_patch,
            queries_per_frame=self.queries_per_frame, frames=self.frames,
            heads=self.cond_heads, vocab=self.vocab, depth=self.dq_depth,
            ffn_hidden=self.ffn_hidden,
        )

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            latent_channels=self.latent_channels, width=self.width, frames=self.frames,
            heads=self.heads, cond_width=self.cond_width, adapter_div=self.adapter_div,
            sigma_features=self.sigma_features, sigma_dim=self.sigma_dim,
        )

    def sampler_config(self, steps: int | None = None) -> SamplerConfig:
        return SamplerConfig(steps=steps or self.steps, sigma_min=self.sigma_min,
                             sigma_max=self.sigma_max, rho=self.rho)

    def sigma_sampler(self) -> SigmaSampler:
        return SigmaSampler(p_mean=self.p_mean, p_std=self.p_std)

    def guidance(self, s_v: float | None = None, s_t: float | None = None) -> GuidanceScales:
        return GuidanceScales(
            s_v=self.s_v if s_v is None else s_v,
            s_t=self.s_t if s_t is None else s_t,
        )

    def adapter_flags(self) -> AdapterFlags:
        if self.no_adapter:
            return AdapterFlags.none()
        return AdapterFlags(
            spatial=not self.no_sa,
            short=not (self.no_sta or self.no_ta),
            long=not (self.no_lta or self.no_ta),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc).normalized()

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def paper_shape_preset(ref_frames: int = 2) -> RunConfig:
    """Production shape preset: 12 frames, 77 queries per frame, tiny widths.

    ref_frames=2 mirrors the two-reference-frame dataset setting and
    ref_frames=1 the single-reference ones.
    """
    return RunConfig(
        frames=12, ref_frames=ref_frames, queries_per_frame=77,
        cond_width=16, width=16, text_len=8, canvas=16, patch=4, vis_patch=8,
        cond_heads=2, heads=2, sigma_features=8, sigma_dim=16, ffn_hidden=32,
    ).normalized()
