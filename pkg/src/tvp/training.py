"""Two-phase training: base pretrain, then adapter-only transfer.

Phase "base" trains the backbone frame-conditioned but without any text
path. Phase "finetune" loads a base checkpoint, freezes every ``base.``
parameter, and trains only the added components (adapters, cross-attention,
condition encoders, query transformer) with independent text/frame
condition dropout so all guidance branches stay in-distribution.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Manifest, load_manifest, load_video
from .diffusion import dsm_loss
from .model import VideoPredictionModel
from .nn import Adam, ConfigError


class TrainingAborted(RuntimeError):
    """Loss went non-finite; the last periodic checkpoint is kept."""


@dataclass
class TrainStats:
    losses: list[float]
    checkpoint: Path

    def smoothed(self, window: int = 100) -> np.ndarray:
        w = min(window, len(self.losses))
        kernel = np.ones(w) / w
        return np.convolve(np.asarray(self.losses), kernel, mode="valid")


def corpus_latents(corpus_dir: str | Path, manifest: Manifest, model: VideoPredictionModel,
                   split: str):
    """Encode every video of a split once; returns (items, latents, firsts)."""
    items = manifest.split_items(split)
    videos = [load_video(Path(corpus_dir) / it.path) for it in items]
    latents = np.stack([model.encode_video(v) for v in videos]).astype(np.float32)
    firsts = np.stack([v[0] for v in videos]).astype(np.float32)
    return items, latents, firsts


def corpus_geometry(corpus_dir: str | Path, manifest: Manifest) -> int:
    """Canvas size of the corpus, read from its first video."""
    video = load_video(Path(corpus_dir) / manifest.items[0].path)
    return video.shape[-1]


def train_phase(config: RunConfig, corpus_dir: str | Path, phase: str,
                out_path: str | Path, base_ckpt: str | Path | None = None,
                log_every: int = 200, quiet: bool = True) -> TrainStats:
    corpus_dir = Path(corpus_dir)
    out_path = Path(out_path)
    manifest = load_manifest(corpus_dir / "manifest.json")
    config = replace(config, frames=manifest.frames, ref_frames=manifest.k,
                     canvas=corpus_geometry(corpus_dir, manifest)).normalized()
    model = VideoPredictionModel(config, phase=phase, init_seed=config.seed)

    if phase == "finetune":
        if base_ckpt is None:
            raise ConfigError("finetune requires a base checkpoint")
        base = load_checkpoint(base_ckpt)
        if base.phase != "base":
            raise ConfigError(f"{base_ckpt} is a {base.phase!r} checkpoint, expected base")
        loaded = model.store.load_values(base.store)
        if loaded != len(base.store):
            raise ConfigError("base checkpoint does not match the model architecture")
        model.freeze_base()
        model.verify_partition()
    elif base_ckpt is not None:
        raise ConfigError("base phase does not take a base checkpoint")

    items, latents, firsts = corpus_latents(corpus_dir, manifest, model, "train")
    if not items:
        raise ConfigError("train split is empty")
    instructions = [it.instruction for it in items]
    states = [it.states for it in items]
    k = manifest.k

    opt = Adam(model.store, lr=config.lr, betas=(config.beta1, config.beta2))
    rng = np.random.default_rng([config.seed, 0 if phase == "base" else 1])
    sigma_sampler = config.sigma_sampler()
    flags = model.adapter_flags()
    cond_cfg = model.config.conditioning_config()
    kv_tokens = (0 if config.no_me else cond_cfg.text_len) + (
        0 if config.no_de else cond_cfg.queries_per_frame
    )

    losses: list[float] = []
    for step in range(config.train_steps):
        idx = rng.integers(0, len(items), size=config.batch_size)
        x0 = latents[idx]
        b = x0.shape[0]
        sigma = sigma_sampler.sample(rng, b)
        noise = rng.standard_normal(x0.shape).astype(np.float32) * sigma[:, None, None, None, None].astype(np.float32)
        v_present = rng.random(b) >= config.p_drop_v

        kv = None
        live = None
        if model.conditioning is not None:
            t_live = rng.random(b) >= config.p_drop_t
            live = np.flatnonzero(t_live)
            kv = np.zeros((b, config.frames, kv_tokens, config.cond_width), dtype=np.float32)
            if live.size:
                mm, de = model.conditioning.build_batch(
                    [instructions[idx[i]] for i in live],
                    None if config.no_llava else [states[idx[i]] for i in live],
                    firsts[idx[live]],
                    use_multimodal=not config.no_me,
                    use_decomposed=not config.no_de,
                )
                kv[live] = _batch_kv(mm, de, config.frames)

        loss, d_kv = dsm_loss(
            model.denoiser, x0, sigma, noise, cond_latents=x0, k=k, kv=kv,
            flags=flags, v_present=v_present, sigma_data=config.sigma_data,
            want_grad=True,
        )
        if not np.isfinite(loss):
            raise TrainingAborted(
                f"non-finite loss at step {step}; last periodic checkpoint retained"
            )
        if live is not None and live.size and d_kv is not None:
            d_mm, d_de = _split_kv_grad(
                d_kv[live], cond_cfg, use_mm=not config.no_me, use_de=not config.no_de
            )
            model.conditioning.backward_batch(d_mm, d_de)
        opt.step()
        model.store.zero_grads()
        losses.append(loss)
        if not quiet and (step + 1) % log_every == 0:
            recent = float(np.mean(losses[-log_every:]))
            print(f"[{phase}] step {step + 1}/{config.train_steps} loss {recent:.4f}", flush=True)
        if config.ckpt_every and (step + 1) % config.ckpt_every == 0:
            save_checkpoint(out_path, model.store, config, phase)

    save_checkpoint(out_path, model.store, config, phase)
    return TrainStats(losses=losses, checkpoint=out_path)


def _batch_kv(mm: np.ndarray | None, de: np.ndarray | None, frames: int) -> np.ndarray:
    """Per-frame key/value banks for a batch: (B, frames, L, C)."""
    parts = []
    if mm is not None:
        parts.append(np.broadcast_to(mm[:, None], (mm.shape[0], frames) + mm.shape[1:]))
    if de is not None:
        b, rows, c = de.shape
        parts.append(de.reshape(b, frames, rows // frames, c))
    return np.concatenate(parts, axis=2)


def _split_kv_grad(d_kv: np.ndarray, cond_cfg, use_mm: bool, use_de: bool):
    """Invert _batch_kv for gradients: returns (d_mm, d_de)."""
    l_mm = cond_cfg.text_len if use_mm else 0
    d_mm = d_kv[:, :, :l_mm].sum(axis=1) if use_mm else None
    d_de = None
    if use_de:
        tail = d_kv[:, :, l_mm:]
        b, frames, nt, c = tail.shape
        d_de = tail.reshape(b, frames * nt, c)
    return d_mm, d_de
