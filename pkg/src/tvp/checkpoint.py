"""AIDK checkpoint container: config echo, phase tag, parameters, freeze flags.

Layout: magic "AIDK" | u32 version | u32-length phase tag | u32-length
config JSON | u32 parameter count | per-parameter frozen byte | parameter
payload (name-length-prefixed records in store order).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

from .config import RunConfig
from .data import FormatError
from .model import TRAINABLE_PREFIXES, VideoPredictionModel
from .nn import ParamStore

AIDK_MAGIC = b"AIDK"
AIDK_VERSION = 1
PHASES = ("base", "finetune")


@dataclass
class Checkpoint:
    config: RunConfig
    phase: str
    store: ParamStore


def save_checkpoint(path: str | Path, store: ParamStore, config: RunConfig, phase: str) -> None:
    if phase not in PHASES:
        raise FormatError(f"unknown phase {phase!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    phase_b = phase.encode("utf-8")
    config_b = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    flags = bytes(1 if p.frozen else 0 for p in store)
    with open(path, "wb") as f:
        f.write(AIDK_MAGIC)
        f.write(struct.pack("<I", AIDK_VERSION))
        f.write(struct.pack("<I", len(phase_b)))
        f.write(phase_b)
        f.write(struct.pack("<I", len(config_b)))
        f.write(config_b)
        f.write(struct.pack("<I", len(store)))
        f.write(flags)
        f.write(store.to_bytes())


def load_checkpoint(path: str | Path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != AIDK_MAGIC:
        raise FormatError(f"{path}: not an AIDK checkpoint")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != AIDK_VERSION:
        raise FormatError(f"{path}: unsupported AIDK version {version}")
    off = 8
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    phase = data[off : off + n].decode("utf-8")
    off += n
    (n,) = struct.unpack_from("<I", data, off)
    off += 4
    config = RunConfig.from_dict(json.loads(data[off : off + n].decode("utf-8")))
    off += n
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    flags = data[off : off + count]
    off += count
    store = ParamStore.from_bytes(data[off:], count)
    for p, flag in zip(store, flags):
        p.frozen = bool(flag)
    _verify_freeze_partition(store, phase, path)
    return Checkpoint(config=config, phase=phase, store=store)


def _verify_freeze_partition(store: ParamStore, phase: str, path) -> None:
    """Frozen flags must be derivable from name prefixes for the phase."""
    if phase not in PHASES:
        raise FormatError(f"{path}: unknown phase {phase!r}")
    for p in store:
        expect = phase == "finetune" and p.name.startswith("base.")
        if p.frozen != expect:
            raise FormatError(
                f"{path}: frozen flag of {p.name!r} disagrees with its prefix "
                f"for phase {phase!r}; checkpoint rejected"
            )
        if not (p.name.startswith("base.") or p.name.startswith(TRAINABLE_PREFIXES)):
            raise FormatError(f"{path}: parameter {p.name!r} outside the known partition")


def load_model(path: str | Path) -> tuple[VideoPredictionModel, Checkpoint]:
    """Rebuild the model a checkpoint describes and load its weights."""
    ckpt = load_checkpoint(path)
    model = VideoPredictionModel(ckpt.config, phase=ckpt.phase)
    if len(model.store) != len(ckpt.store):
        raise FormatError(
            f"{path}: checkpoint has {len(ckpt.store)} tensors, model built "
            f"from its config has {len(model.store)}"
        )
    model.store.load_values(ckpt.store, strict=True)
    if ckpt.phase == "finetune":
        model.freeze_base()
    return model, ckpt
