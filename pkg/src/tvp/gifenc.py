"""Minimal GIF89a writer with a fixed global palette.

Palette: the uniform 6x6x6 color cube (216 entries) padded to 256 with a
40-step grayscale ramp. Pixels are displayed on [0, 1] (negative values
clip to black) and mapped to the nearest palette entry exactly.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

GIF_HEADER = b"GIF89a"
MIN_CODE_SIZE = 8


def build_palette() -> np.ndarray:
    """(256, 3) uint8: 216-cube then 40 gray levels."""
    levels = np.array([0, 51, 102, 153, 204, 255], dtype=np.uint8)
    cube = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), axis=-1).reshape(-1, 3)
    grays = np.round(np.linspace(0, 255, 40)).astype(np.uint8)
    ramp = np.stack([grays, grays, grays], axis=1)
    return np.concatenate([cube, ramp], axis=0)


PALETTE = build_palette()


def quantize(frame_u8: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (H, W) palette indices, exact nearest neighbour."""
    flat = frame_u8.reshape(-1, 3).astype(np.int32)
    d = ((flat[:, None, :] - PALETTE[None, :, :].astype(np.int32)) ** 2).sum(axis=2)
    return d.argmin(axis=1).astype(np.uint8).reshape(frame_u8.shape[:2])


def to_display_u8(video: np.ndarray) -> np.ndarray:
    """(N, 3, H, W) floats -> (N, H, W, 3) uint8 on the [0, 1] display range."""
    v = np.clip(video, 0.0, 1.0)
    return np.round(v * 255.0).astype(np.uint8).transpose(0, 2, 3, 1)


def lzw_encode(indices: bytes, min_code_size: int = MIN_CODE_SIZE) -> bytes:
    clear = 1 << min_code_size
    eoi = clear + 1
    out = bytearray()
    acc = 0
    nbits = 0
    code_size = min_code_size + 1

    def emit(code: int) -> None:
        nonlocal acc, nbits
        acc |= code << nbits
        nbits += code_size
        while nbits >= 8:
            out.append(acc & 0xFF)
            acc >>= 8
            nbits -= 8

    def fresh_table() -> dict:
        return {bytes([i]): i for i in range(clear)}

    table = fresh_table()
    next_code = eoi + 1
    emit(clear)
    seq = b""
    for byte in indices:
        cand = seq + bytes([byte])
        if cand in table:
            seq = cand
            continue
        emit(table[seq])
        if next_code == 4096:
            # table full: restart so the decoder stays in lockstep
            emit(clear)
            table = fresh_table()
            next_code = eoi + 1
            code_size = min_code_size + 1
        else:
            # widen before defining: the decoder grows its table one entry
            # behind the encoder, so the width must change for the next code
            if next_code == (1 << code_size) and code_size < 12:
                code_size += 1
            table[cand] = next_code
            next_code += 1
        seq = bytes([byte])
    if seq:
        emit(table[seq])
    emit(eoi)
    if nbits:
        out.append(acc & 0xFF)
    return bytes(out)


def _sub_blocks(data: bytes) -> bytes:
    out = bytearray()
    for i in range(0, len(data), 255):
        chunk = data[i : i + 255]
        out.append(len(chunk))
        out.extend(chunk)
    out.append(0)
    return bytes(out)


def write_gif(path: str | Path, video: np.ndarray, fps: float = 4.0) -> None:
    """Animated GIF89a of an (N, 3, H, W) float video."""
    if video.ndim != 4 or video.shape[0] < 1:
        raise ValueError(f"expected a non-empty (N, 3, H, W) video, got {video.shape}")
    frames = to_display_u8(video)
    n, h, w, _ = frames.shape
    delay = max(1, round(100.0 / fps))
    out = bytearray()
    out.extend(GIF_HEADER)
    out.extend(struct.pack("<HH", w, h))
    out.append(0xF7)  # global table, 8-bit color resolution, 256 entries
    out.append(0)     # background color index
    out.append(0)     # aspect ratio
    out.extend(PALETTE.tobytes())
    # loop forever
    out.extend(b"\x21\xff\x0bNETSCAPE2.0\x03\x01\x00\x00\x00")
    for i in range(n):
        out.extend(b"\x21\xf9\x04\x04")   # graphic control, disposal=1
        out.extend(struct.pack("<H", delay))
        out.extend(b"\x00\x00")           # no transparency
        out.append(0x2C)
        out.extend(struct.pack("<HHHH", 0, 0, w, h))
        out.append(0)                     # no local table
        out.append(MIN_CODE_SIZE)
        out.extend(_sub_blocks(lzw_encode(quantize(frames[i]).tobytes())))
    out.append(0x3B)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(out))
