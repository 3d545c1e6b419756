"""Multimodal conditioning: toy text/visual encoders and a dual-branch
query transformer that yields a per-frame cross-attention bank.

The upper branch aligns the instruction embedding with visual tokens of
the first reference frame (multimodal embedding). The lower branch runs a
learnable query bank through cross-attention into the instruction and the
staged state prompts, producing one slice of conditioning rows per frame
(decomposed embedding). Both concatenated form the condition bank; each
frame's cross-attention keys/values are the full multimodal embedding
plus that frame's slice.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from .data import state_prompter  # noqa: F401  re-exported: prompting is part of this surface
from .nn import (
    ConfigError,
    CrossAttentionBlock,
    Embedding,
    FeedForward,
    ParamStore,
    SelfAttentionBlock,
    ShapeError,
    default_dtype,
)
from .nn.layers import Linear, gauss_init


@dataclass(frozen=True)
class ConditioningConfig:
    width: int = 32           # embedding width C
    text_len: int = 16        # padded token count per text
    vis_patch: int = 8        # visual patch size over the first frame
    queries_per_frame: int = 8
    frames: int = 8
    heads: int = 4
    vocab: int = 256
    depth: int = 1            # attention cells per branch
    ffn_hidden: int = 64

    def visual_tokens(self, h: int, w: int) -> int:
        if h % self.vis_patch or w % self.vis_patch:
            raise ConfigError(f"frame {h}x{w} not divisible by visual patch {self.vis_patch}")
        return (h // self.vis_patch) * (w // self.vis_patch)


def tokenize(text: str, length: int, vocab: int) -> np.ndarray:
    """Whitespace/lowercase words hashed into a fixed vocabulary; 0 pads."""
    ids = np.zeros(length, dtype=np.int64)
    for j, word in enumerate(text.lower().split()[:length]):
        ids[j] = zlib.crc32(word.encode("utf-8")) % (vocab - 1) + 1
    return ids


@dataclass
class MCondition:
    """Condition bank: global multimodal rows plus frame-sliced rows."""

    multimodal: np.ndarray | None   # (L_t, C)
    decomposed: np.ndarray | None   # (frames * N_t, C)
    frames: int

    def __post_init__(self):
        if self.multimodal is None and self.decomposed is None:
            raise ShapeError("MCondition needs at least one part")
        if (
            self.multimodal is not None
            and self.decomposed is not None
            and self.multimodal.shape[-1] != self.decomposed.shape[-1]
        ):
            raise ShapeError(
                f"width mismatch: multimodal {self.multimodal.shape} vs "
                f"decomposed {self.decomposed.shape}"
            )
        if self.decomposed is not None and self.decomposed.shape[0] % self.frames:
            raise ShapeError(
                f"decomposed rows {self.decomposed.shape[0]} not divisible by {self.frames} frames"
            )

    @property
    def width(self) -> int:
        part = self.multimodal if self.multimodal is not None else self.decomposed
        return part.shape[-1]

    def tokens(self) -> int:
        n = 0
        if self.multimodal is not None:
            n += self.multimodal.shape[0]
        if self.decomposed is not None:
            n += self.decomposed.shape[0]
        return n


def build_mcondition(multimodal: np.ndarray | None, decomposed: np.ndarray | None,
                     frames: int) -> MCondition:
    return MCondition(multimodal, decomposed, frames)


def null_mcondition(cfg: ConditioningConfig) -> MCondition:
    """The dropped-text condition: all-zero embeddings of the usual shapes."""
    dt = default_dtype()
    return MCondition(
        np.zeros((cfg.text_len, cfg.width), dtype=dt),
        np.zeros((cfg.frames * cfg.queries_per_frame, cfg.width), dtype=dt),
        cfg.frames,
    )


def frame_kv(mc: MCondition, index: int) -> np.ndarray:
    """Key/value rows for one frame: all multimodal rows + that frame's slice."""
    if not 0 <= index < mc.frames:
        raise IndexError(f"frame index {index} out of range 0..{mc.frames - 1}")
    parts = []
    if mc.multimodal is not None:
        parts.append(mc.multimodal)
    if mc.decomposed is not None:
        n_t = mc.decomposed.shape[0] // mc.frames
        parts.append(mc.decomposed[index * n_t : (index + 1) * n_t])
    return np.concatenate(parts, axis=0)


def stacked_kv(mc: MCondition) -> np.ndarray:
    """frame_kv for every frame, stacked to (frames, L_kv, C)."""
    return np.stack([frame_kv(mc, i) for i in range(mc.frames)])


class TextEncoder:
    """Hash-vocabulary token embedding + position + one self-attention cell."""

    def __init__(self, store: ParamStore, cfg: ConditioningConfig, rng: np.random.Generator,
                 prefix: str = "text_enc"):
        self.cfg = cfg
        self.embed = Embedding(store, f"{prefix}.embed", cfg.vocab, cfg.width, rng)
        self.embed.table.value[...] = gauss_init(rng, self.embed.table.value.shape, 0.1)
        self.pos = store.add(f"{prefix}.pos", gauss_init(rng, (cfg.text_len, cfg.width), 0.1))
        self.attn = SelfAttentionBlock(store, f"{prefix}.attn", cfg.width, cfg.heads, rng)

    def encode_ids(self, ids: np.ndarray) -> np.ndarray:
        """ids (B, L_t) -> embeddings (B, L_t, C); one cached forward."""
        x = self.embed.forward(ids) + self.pos.value
        return self.attn.forward(x)

    def backward(self, dy: np.ndarray) -> None:
        dx = self.attn.backward(dy)
        self.pos.accumulate(dx.sum(axis=tuple(range(dx.ndim - 2))))
        self.embed.backward(dx)

    def forward_text(self, text: str) -> np.ndarray:
        """Single-text convenience; empty text maps to the null embedding."""
        if not text.strip():
            return np.zeros((self.cfg.text_len, self.cfg.width), dtype=default_dtype())
        ids = tokenize(text, self.cfg.text_len, self.cfg.vocab)
        return self.encode_ids(ids[None])[0]


class VisualEncoder:
    """Patchify the first frame, project to width, add position, one attention cell."""

    def __init__(self, store: ParamStore, cfg: ConditioningConfig, rng: np.random.Generator,
                 frame_hw: tuple[int, int] = (32, 32), prefix: str = "vis_enc"):
        self.cfg = cfg
        self.frame_hw = frame_hw
        tokens = cfg.visual_tokens(*frame_hw)
        self.proj = Linear(store, f"{prefix}.proj", 3 * cfg.vis_patch**2, cfg.width, rng)
        self.pos = store.add(f"{prefix}.pos", gauss_init(rng, (tokens, cfg.width), 0.1))
        self.attn = SelfAttentionBlock(store, f"{prefix}.attn", cfg.width, cfg.heads, rng)

    def _patchify(self, frames: np.ndarray) -> np.ndarray:
        p = self.cfg.vis_patch
        b, c, hh, ww = frames.shape
        if hh % p or ww % p:
            raise ConfigError(f"frame {hh}x{ww} not divisible by visual patch {p}")
        g = frames.reshape(b, c, hh // p, p, ww // p, p).transpose(0, 2, 4, 1, 3, 5)
        return g.reshape(b, (hh // p) * (ww // p), c * p * p)

    def forward(self, frames: np.ndarray) -> np.ndarray:
        """(B, 3, H, W) -> (B, tokens, C); also accepts a single (3, H, W) frame."""
        self._single = frames.ndim == 3
        if self._single:
            frames = frames[None]
        self._fshape = frames.shape
        x = self.proj.forward(self._patchify(frames)) + self.pos.value
        out = self.attn.forward(x)
        return out[0] if self._single else out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self._single:
            dy = dy[None]
        dx = self.attn.backward(dy)
        self.pos.accumulate(dx.sum(axis=0))
        dpatch = self.proj.backward(dx)
        p = self.cfg.vis_patch
        b, c, hh, ww = self._fshape
        g = dpatch.reshape(b, hh // p, ww // p, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        dframe = g.reshape(b, c, hh, ww)
        return dframe[0] if self._single else dframe


class _BranchCell:
    """One attention cell: self-attention, one or two cross-attentions, FFN."""

    def __init__(self, store, name, cfg, rng, crosses: int):
        self.selfattn = SelfAttentionBlock(store, f"{name}.selfattn", cfg.width, cfg.heads, rng)
        self.crosses = [
            CrossAttentionBlock(store, f"{name}.cross{j}", cfg.width, cfg.width, cfg.heads, rng)
            for j in range(crosses)
        ]
        self.ffn = FeedForward(store, f"{name}.ffn", cfg.width, cfg.ffn_hidden, rng)

    def forward(self, x, kvs: list[np.ndarray]) -> np.ndarray:
        x = self.selfattn.forward(x)
        for block, kv in zip(self.crosses, kvs):
            x = block.forward(x, kv)
        return self.ffn.forward(x)

    def backward(self, dy):
        dy = self.ffn.backward(dy)
        dkvs = []
        for block in reversed(self.crosses):
            dy, dkv = block.backward(dy)
            dkvs.append(dkv)
        return self.selfattn.backward(dy), list(reversed(dkvs))


class DQFormer:
    """Dual-branch condition mixer with a learnable frame-ordered query bank."""

    def __init__(self, store: ParamStore, cfg: ConditioningConfig, rng: np.random.Generator,
                 prefix: str = "dqformer"):
        self.cfg = cfg
        bank = gauss_init(rng, (cfg.frames * cfg.queries_per_frame, cfg.width), 0.1)
        self.query_bank = store.add(f"{prefix}.query_bank", bank)
        self.mm_cells = [
            _BranchCell(store, f"{prefix}.mm{j}", cfg, rng, crosses=1) for j in range(cfg.depth)
        ]
        self.de_cells = [
            _BranchCell(store, f"{prefix}.de{j}", cfg, rng, crosses=2) for j in range(cfg.depth)
        ]

    def multimodal_branch(self, t1: np.ndarray, v: np.ndarray) -> np.ndarray:
        if t1.shape[-1] != v.shape[-1]:
            raise ShapeError(f"width mismatch: t1 {t1.shape} vs v {v.shape}")
        h = t1
        for cell in self.mm_cells:
            h = cell.forward(h, [v])
        return h

    def multimodal_backward(self, d_mm: np.ndarray):
        d_v = None
        for cell in reversed(self.mm_cells):
            d_mm, (dv,) = cell.backward(d_mm)
            d_v = dv if d_v is None else d_v + dv
        return d_mm, d_v

    def decomposed_branch(self, t1: np.ndarray, t2: np.ndarray | None) -> np.ndarray:
        """t2 is the staged-state bank; when absent, t1 stands in for it.

        Accepts (L, C) rows or batched (B, L, C); the query bank broadcasts
        over the batch.
        """
        self._t2_fallback = t2 is None
        kv2 = t1 if self._t2_fallback else t2
        h = self.query_bank.value
        self._batched = t1.ndim == 3
        if self._batched:
            h = np.broadcast_to(h, (t1.shape[0],) + h.shape)
        for cell in self.de_cells:
            h = cell.forward(h, [t1, kv2])
        return h

    def decomposed_backward(self, d_de: np.ndarray):
        d_t1 = None
        d_t2 = None
        for cell in reversed(self.de_cells):
            d_de, (dkv1, dkv2) = cell.backward(d_de)
            d_t1 = dkv1 if d_t1 is None else d_t1 + dkv1
            if self._t2_fallback:
                d_t1 = d_t1 + dkv2
            else:
                d_t2 = dkv2 if d_t2 is None else d_t2 + dkv2
        self.query_bank.accumulate(d_de.sum(axis=0) if self._batched else d_de)
        return d_t1, d_t2


class ConditioningModule:
    """Everything between raw (instruction, states, frame) and the MCondition."""

    def __init__(self, store: ParamStore, cfg: ConditioningConfig, rng: np.random.Generator,
                 frame_hw: tuple[int, int] = (32, 32)):
        self.cfg = cfg
        self.text_encoder = TextEncoder(store, cfg, rng)
        self.vis_encoder = VisualEncoder(store, cfg, rng, frame_hw)
        self.dqformer = DQFormer(store, cfg, rng)

    def build_batch(self, instructions: list[str], states_list: list[list[str]] | None,
                    first_frames: np.ndarray, use_multimodal: bool = True,
                    use_decomposed: bool = True):
        """Batched conditioning: returns (mm (B, L_t, C) or None, de (B, NQ, C) or None).

        All samples must carry the same number of state prompts (or none,
        the staged-prompt ablation).
        """
        if not use_multimodal and not use_decomposed:
            raise ConfigError("at least one condition branch must stay enabled")
        cfg = self.cfg
        b = len(instructions)
        n_states = len(states_list[0]) if states_list else 0
        texts = []
        for i, instr in enumerate(instructions):
            texts.append(instr)
            if n_states:
                if len(states_list[i]) != n_states:
                    raise ConfigError("state prompt count must match across the batch")
                texts.extend(states_list[i])
        ids = np.stack([tokenize(t, cfg.text_len, cfg.vocab) for t in texts])
        embs = self.text_encoder.encode_ids(ids).reshape(b, 1 + n_states, cfg.text_len, cfg.width)
        t1 = embs[:, 0]
        t2 = embs[:, 1:].reshape(b, n_states * cfg.text_len, cfg.width) if n_states else None
        v = self.vis_encoder.forward(first_frames)
        self._state = (b, n_states, use_multimodal, use_decomposed)
        mm = self.dqformer.multimodal_branch(t1, v) if use_multimodal else None
        de = self.dqformer.decomposed_branch(t1, t2) if use_decomposed else None
        return mm, de

    def backward_batch(self, d_mm: np.ndarray | None, d_de: np.ndarray | None) -> None:
        b, n_states, use_mm, use_de = self._state
        cfg = self.cfg
        d_t1 = np.zeros((b, cfg.text_len, cfg.width), dtype=default_dtype())
        d_t2 = None
        d_v = None
        if use_de and d_de is not None:
            g1, g2 = self.dqformer.decomposed_backward(d_de)
            d_t1 = d_t1 + g1
            if g2 is not None:
                d_t2 = g2
        if use_mm and d_mm is not None:
            g1, gv = self.dqformer.multimodal_backward(d_mm)
            d_t1 = d_t1 + g1
            d_v = gv
        d_embs = np.zeros((b, 1 + n_states, cfg.text_len, cfg.width), dtype=d_t1.dtype)
        d_embs[:, 0] = d_t1
        if d_t2 is not None:
            d_embs[:, 1:] = d_t2.reshape(b, n_states, cfg.text_len, cfg.width)
        self.text_encoder.backward(d_embs.reshape(-1, cfg.text_len, cfg.width))
        if d_v is not None:
            self.vis_encoder.backward(d_v)

    def build(self, instruction: str, states: list[str] | None, first_frame: np.ndarray,
              use_multimodal: bool = True, use_decomposed: bool = True) -> MCondition:
        mm, de = self.build_batch(
            [instruction], [list(states)] if states else None, first_frame[None],
            use_multimodal, use_decomposed,
        )
        return build_mcondition(
            mm[0] if mm is not None else None,
            de[0] if de is not None else None,
            self.cfg.frames,
        )

    def backward(self, d_mm: np.ndarray | None, d_de: np.ndarray | None) -> None:
        self.backward_batch(
            d_mm[None] if d_mm is not None else None,
            d_de[None] if d_de is not None else None,
        )
