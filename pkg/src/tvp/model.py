"""Full video prediction model: codec + conditioning + backbone + sampler.

Two phases exist. "base" holds only the backbone (no cross-attention, no
adapters) and is trained frame-conditioned without text. "finetune" adds
the conditioning path and adapters on top of a frozen base.
"""

from __future__ import annotations

import numpy as np

from .backbone import AdapterFlags, UNet
from .codec import LatentCodec
from .conditioning import (
    ConditioningModule,
    MCondition,
    null_mcondition,
    stacked_kv,
)
from .config import RunConfig
from .data import parse_instruction, state_prompter
from .diffusion import EDMDenoiser, GuidanceScales, dual_cfg, euler_sample, karras_grid
from .nn import ConfigError, ParamStore

TRAINABLE_PREFIXES = ("adapter.", "xattn.", "dqformer.", "text_enc.", "vis_enc.")


class VideoPredictionModel:
    def __init__(self, config: RunConfig, phase: str = "finetune",
                 init_seed: int | None = None):
        if phase not in ("base", "finetune"):
            raise ConfigError(f"unknown phase {phase!r}")
        self.config = config = config.normalized()
        self.phase = phase
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed if init_seed is None else init_seed)
        self.codec = LatentCodec(config.codec_config())
        base_only = phase == "base"
        self.with_xattn = not base_only and not config.no_mc
        self.with_adapters = not base_only and not config.no_adapter
        self.unet = UNet(self.store, config.backbone_config(), rng,
                         with_xattn=self.with_xattn, with_adapters=self.with_adapters)
        self.conditioning = (
            ConditioningModule(self.store, config.conditioning_config(), rng,
                               frame_hw=(config.canvas, config.canvas))
            if self.with_xattn else None
        )
        self.denoiser = EDMDenoiser(self.unet, config.latent_channels, config.sigma_data)

    # -- parameter partition -------------------------------------------------

    def freeze_base(self) -> int:
        return self.store.freeze_prefix("base.")

    def verify_partition(self) -> None:
        for p in self.store:
            is_base = p.name.startswith("base.")
            is_added = p.name.startswith(TRAINABLE_PREFIXES)
            if is_base == is_added:
                raise ConfigError(f"parameter {p.name!r} falls outside the freeze partition")

    def adapter_flags(self) -> AdapterFlags:
        if not self.with_adapters:
            return AdapterFlags.none()
        return self.config.adapter_flags()

    # -- latent space -----------------------------------------------------------

    def encode_video(self, video: np.ndarray) -> np.ndarray:
        """Pixels to diffusion-scaled latents (codec latents * latent_scale)."""
        return (self.codec.encode(video) * self.config.latent_scale).astype(np.float32)

    def decode_latents(self, latents: np.ndarray) -> np.ndarray:
        return self.codec.decode(latents / self.config.latent_scale)

    # -- conditioning ---------------------------------------------------------

    def mcondition(self, instruction: str, first_frame: np.ndarray,
                   states: list[str] | None = None) -> MCondition | None:
        """Conditioned bank for one sample; None when the model has no text path."""
        cfg = self.config
        if self.conditioning is None or cfg.no_mc:
            return None
        if states is None and not cfg.no_llava:
            states = state_prompter(parse_instruction(instruction))
        if cfg.no_llava:
            states = None
        return self.conditioning.build(
            instruction, states, first_frame,
            use_multimodal=not cfg.no_me, use_decomposed=not cfg.no_de,
        )

    def null_mcondition(self) -> MCondition:
        return null_mcondition(self.config.conditioning_config())

    # -- sampling --------------------------------------------------------------

    def sample(self, noise: np.ndarray, cond_latents: np.ndarray | None, k: int,
               mcond: MCondition | None, scales: GuidanceScales,
               steps: int | None = None) -> np.ndarray:
        """Deterministic dual-guidance sampling of one latent video."""
        grid = karras_grid(self.config.sampler_config(steps)).astype(np.float64)
        flags = self.adapter_flags()
        if self.with_xattn:
            kv_vt = stacked_kv(mcond if mcond is not None else self.null_mcondition())[None]
            kv_null = np.zeros_like(kv_vt)
            kv_b = np.concatenate([kv_null, kv_null, kv_vt.astype(kv_null.dtype)])
        else:
            kv_b = None

        def guided(x, sigma):
            xb = np.broadcast_to(x, (3,) + x.shape)
            cond_b = (
                np.broadcast_to(cond_latents, (3,) + cond_latents.shape)
                if cond_latents is not None else None
            )
            v_present = np.array([False, True, True]) if cond_b is not None else None
            d = self.denoiser.denoise(
                xb, np.full(3, sigma), cond_b, k, kv_b, flags, v_present=v_present
            )
            e_uu, e_vu = d[0], d[1]
            e_vt = d[2] if kv_b is not None else e_vu
            return dual_cfg(e_uu, e_vu, e_vt, scales)

        noise = noise.astype(np.float32)
        return euler_sample(guided, noise, grid)

    def predict(self, ref_frames: np.ndarray, instruction: str | None,
                rng: np.random.Generator, scales: GuidanceScales | None = None,
                steps: int | None = None, states: list[str] | None = None) -> np.ndarray:
        """Predict a full pixel video from k reference frames and an instruction.

        Frames below k in the output come from the conditioning path
        (encode-decode of the references), frames at and above k from the
        sampler.
        """
        cfg = self.config
        k = ref_frames.shape[0]
        if not 1 <= k < cfg.frames:
            raise ConfigError(f"got {k} reference frames for a {cfg.frames}-frame model")
        ref_latents = self.encode_video(ref_frames.astype(np.float32))
        cond = np.zeros((cfg.frames,) + ref_latents.shape[1:], dtype=np.float32)
        cond[:k] = ref_latents
        mcond = None
        if instruction is not None and self.conditioning is not None:
            mcond = self.mcondition(instruction, ref_frames[0].astype(np.float32), states)
        noise = rng.standard_normal(cond.shape).astype(np.float32)
        latents = self.sample(noise, cond, k, mcond, scales or cfg.guidance(), steps)
        pixels = self.decode_latents(latents)
        pixels[:k] = self.decode_latents(ref_latents)
        return pixels.astype(np.float32)
