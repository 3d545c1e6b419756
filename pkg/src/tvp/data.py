"""Synthetic moving-shape video corpus with an analytic motion oracle.

One colored shape translates across a 32x32 canvas. The instruction
grammar is "move the <color> <shape> <direction>", and every rendered
clip can be judged programmatically by tracking the color-masked
centroid of the instructed object.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CANVAS = 32
SUPERSAMPLE = 4

COLORS = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0)}
SHAPES = ("square", "circle", "triangle")
DIRECTIONS = {"left": (-1.0, 0.0), "right": (1.0, 0.0), "up": (0.0, -1.0), "down": (0.0, 1.0)}
NUM_STATES = 4


class GrammarError(ValueError):
    """Instruction text falls outside the synthetic grammar."""


class FormatError(ValueError):
    """A binary container is malformed or truncated."""


@dataclass(frozen=True)
class Instruction:
    color: str
    shape: str
    direction: str

    @property
    def text(self) -> str:
        return f"move the {self.color} {self.shape} {self.direction}"


def parse_instruction(text: str) -> Instruction:
    words = text.strip().lower().split()
    if (
        len(words) != 5
        or words[:2] != ["move", "the"]
        or words[2] not in COLORS
        or words[3] not in SHAPES
        or words[4] not in DIRECTIONS
    ):
        raise GrammarError(
            f"instruction {text!r} is outside the grammar "
            f"'move the <color> <shape> <direction>'"
        )
    return Instruction(color=words[2], shape=words[3], direction=words[4])


def state_prompter(instruction: Instruction, scene: "SceneSpec | None" = None) -> list[str]:
    """Expand one instruction into four temporal stage descriptions."""
    obj = f"{instruction.color} {instruction.shape}"
    d = instruction.direction
    return [
        f"{obj} at start position",
        f"{obj} moving {d}",
        f"{obj} continuing {d}",
        f"{obj} at {d} side",
    ]


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: str
    start: tuple[float, float]  # center, pixel coordinates (x right, y down)
    velocity: tuple[float, float]  # pixels per frame
    size: float  # square side, circle diameter, triangle side
    frames: int
    canvas: int = CANVAS

    def center_at(self, index: int) -> tuple[float, float]:
        return (
            self.start[0] + index * self.velocity[0],
            self.start[1] + index * self.velocity[1],
        )

    def extent(self) -> float:
        """Circumradius of the shape around its center."""
        if self.shape == "square":
            return self.size * np.sqrt(2.0) / 2.0
        if self.shape == "circle":
            return self.size / 2.0
        return self.size / np.sqrt(3.0)

    def in_canvas(self, margin: float = 0.5) -> bool:
        r = self.extent() + margin
        for i in range(self.frames):
            cx, cy = self.center_at(i)
            if not (r <= cx <= self.canvas - r and r <= cy <= self.canvas - r):
                return False
        return True


def _coverage(shape: str, cx: float, cy: float, size: float, canvas: int) -> np.ndarray:
    ss = SUPERSAMPLE
    coords = (np.arange(canvas * ss) + 0.5) / ss
    xx, yy = np.meshgrid(coords, coords)
    if shape == "square":
        inside = np.maximum(np.abs(xx - cx), np.abs(yy - cy)) <= size / 2.0
    elif shape == "circle":
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= (size / 2.0) ** 2
    elif shape == "triangle":
        # equilateral, apex up: inside iff all three edge cross-products agree
        rr = size / np.sqrt(3.0)
        ri = size / (2.0 * np.sqrt(3.0))
        ax, ay = cx, cy - rr
        bx, by = cx - size / 2.0, cy + ri
        dx, dy = cx + size / 2.0, cy + ri
        e1 = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        e2 = (dx - bx) * (yy - by) - (dy - by) * (xx - bx)
        e3 = (ax - dx) * (yy - dy) - (ay - dy) * (xx - dx)
        # vertices wind clockwise on a y-down canvas, so inside is non-positive
        inside = (e1 <= 0) & (e2 <= 0) & (e3 <= 0)
    else:
        raise GrammarError(f"unknown shape {shape!r}")
    return inside.reshape(canvas, ss, canvas, ss).mean(axis=(1, 3))


def render_frame(scene: SceneSpec, index: int) -> np.ndarray:
    cx, cy = scene.center_at(index)
    cov = _coverage(scene.shape, cx, cy, scene.size, scene.canvas)
    color = np.asarray(COLORS[scene.color], dtype=np.float32)
    return (color[:, None, None] * cov[None].astype(np.float32))


def render_video(scene: SceneSpec) -> np.ndarray:
    """(N, 3, H, W) float32 frames; background is zero, values in [0, 1]."""
    return np.stack([render_frame(scene, i) for i in range(scene.frames)])


# -- motion oracle -----------------------------------------------------------

@dataclass
class OracleResult:
    follows: bool
    displacement: tuple[float, float]
    reason: str = ""


def color_centroid(frame: np.ndarray, color: str) -> tuple[float, float] | None:
    """Centroid of pixels where the named channel dominates; None if absent."""
    idx = list(COLORS).index(color)
    others = np.delete(frame, idx, axis=0).max(axis=0)
    weight = np.clip(frame[idx] - others, 0.0, 1.0)
    total = weight.sum()
    if total < 1e-6:
        return None
    h, w = weight.shape
    xs = np.arange(w) + 0.5
    ys = np.arange(h) + 0.5
    return (
        float((weight.sum(axis=0) * xs).sum() / total),
        float((weight.sum(axis=1) * ys).sum() / total),
    )


def oracle_eval(video: np.ndarray, instruction: Instruction,
                threshold: float = 3.0) -> OracleResult:
    """Judge whether the instructed object moved the instructed way.

    The dominant displacement axis of the color-masked centroid must match
    the instruction's axis and sign, with magnitude at least `threshold` px.
    """
    if video.shape[0] < 1:
        raise FormatError("empty video")
    first = color_centroid(video[0], instruction.color)
    if first is None:
        return OracleResult(False, (0.0, 0.0), f"color {instruction.color} absent from frame 0")
    last = color_centroid(video[-1], instruction.color)
    if last is None:
        return OracleResult(False, (0.0, 0.0), f"color {instruction.color} absent from last frame")
    dx, dy = last[0] - first[0], last[1] - first[1]
    ux, uy = DIRECTIONS[instruction.direction]
    axis_disp, off_disp = (dx, dy) if ux else (dy, dx)
    signed = axis_disp * (ux + uy)  # the instructed axis has exactly one nonzero component
    if abs(axis_disp) < abs(off_disp):
        return OracleResult(False, (dx, dy), "dominant axis does not match instruction")
    if signed < threshold:
        return OracleResult(False, (dx, dy), "displacement below threshold or wrong sign")
    return OracleResult(True, (dx, dy))


# -- AIDV binary video container ---------------------------------------------

AIDV_MAGIC = b"AIDV"
AIDV_VERSION = 1


def save_video(video: np.ndarray, path: str | Path) -> None:
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4:
        raise FormatError(f"expected (N, C, H, W) video, got shape {video.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(AIDV_MAGIC)
        f.write(struct.pack("<5I", AIDV_VERSION, *video.shape))
        f.write(np.ascontiguousarray(video, dtype="<f4").tobytes())


def load_video(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 24 or data[:4] != AIDV_MAGIC:
        raise FormatError(f"{path}: not an AIDV file")
    version, n, c, h, w = struct.unpack_from("<5I", data, 4)
    if version != AIDV_VERSION:
        raise FormatError(f"{path}: unsupported AIDV version {version}")
    expected = 24 + 4 * n * c * h * w
    if len(data) != expected:
        raise FormatError(f"{path}: payload is {len(data)} bytes, expected {expected}")
    return np.frombuffer(data, dtype="<f4", offset=24).reshape(n, c, h, w).copy()


# -- corpus generation ---------------------------------------------------------

@dataclass
class ManifestItem:
    id: str
    instruction: str
    states: list[str]
    k: int
    path: str
    split: str
    scene: dict = field(default_factory=dict)


@dataclass
class Manifest:
    seed: int
    frames: int
    k: int
    items: list[ManifestItem]

    def split_items(self, split: str) -> list[ManifestItem]:
        return [it for it in self.items if it.split == split]


def sample_scene(rng: np.random.Generator, instruction: Instruction, frames: int,
                 canvas: int = CANVAS, max_retries: int = 100) -> SceneSpec:
    """Sample a scene consistent with the instruction, kept fully in-canvas."""
    ux, uy = DIRECTIONS[instruction.direction]
    scale = canvas / CANVAS
    for _ in range(max_retries):
        speed = rng.uniform(1.5, 2.5) * scale
        size = rng.uniform(6.0, 9.0) * scale
        vel = (ux * speed, uy * speed)
        travel_x, travel_y = vel[0] * (frames - 1), vel[1] * (frames - 1)
        r = SceneSpec(instruction.shape, instruction.color, (0, 0), vel, size, frames, canvas).extent() + 0.5
        lo_x, hi_x = r - min(travel_x, 0.0), canvas - r - max(travel_x, 0.0)
        lo_y, hi_y = r - min(travel_y, 0.0), canvas - r - max(travel_y, 0.0)
        if lo_x > hi_x or lo_y > hi_y:
            continue
        start = (rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y))
        scene = SceneSpec(instruction.shape, instruction.color, start, vel, size, frames, canvas)
        if scene.in_canvas():
            return scene
    raise RuntimeError(f"could not place {instruction.text!r} in canvas after {max_retries} tries")


def _assign_splits(ids: list[str]) -> dict[str, str]:
    n_val = int(round(0.2 * len(ids)))
    ranked = sorted(ids, key=lambda s: (zlib.crc32(s.encode("utf-8")), s))
    val = set(ranked[:n_val])
    return {i: ("val" if i in val else "train") for i in ids}


def generate_corpus(out_dir: str | Path, num: int, frames: int, k: int, seed: int,
                    canvas: int = CANVAS) -> Manifest:
    """Render `num` clips with instructions and write them under `out_dir`."""
    if num < 1:
        raise ValueError("corpus needs at least one item")
    if not 1 <= k < frames:
        raise ValueError(f"reference frame count k={k} must satisfy 1 <= k < frames={frames}")
    out = Path(out_dir)
    (out / "videos").mkdir(parents=True, exist_ok=True)
    ids = [f"item-{i:05d}" for i in range(num)]
    splits = _assign_splits(ids)
    items = []
    for i, item_id in enumerate(ids):
        rng = np.random.default_rng([seed, i])
        instruction = Instruction(
            color=list(COLORS)[rng.integers(len(COLORS))],
            shape=SHAPES[rng.integers(len(SHAPES))],
            direction=list(DIRECTIONS)[rng.integers(len(DIRECTIONS))],
        )
        scene = sample_scene(rng, instruction, frames, canvas=canvas)
        video = render_video(scene)
        rel = f"videos/{item_id}.aidv"
        save_video(video, out / rel)
        items.append(ManifestItem(
            id=item_id,
            instruction=instruction.text,
            states=state_prompter(instruction),
            k=k,
            path=rel,
            split=splits[item_id],
            scene={
                "shape": scene.shape, "color": scene.color,
                "start": list(scene.start), "velocity": list(scene.velocity),
                "size": scene.size,
            },
        ))
    manifest = Manifest(seed=seed, frames=frames, k=k, items=items)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    doc = {
        "seed": manifest.seed,
        "frames": manifest.frames,
        "k": manifest.k,
        "items": [vars(it) for it in manifest.items],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    items = [ManifestItem(**it) for it in doc["items"]]
    manifest = Manifest(seed=doc["seed"], frames=doc["frames"], k=doc["k"], items=items)
    seen = set()
    for it in items:
        if it.id in seen:
            raise FormatError(f"duplicate manifest id {it.id!r}")
        seen.add(it.id)
        if not (path.parent / it.path).exists():
            raise FormatError(f"manifest references missing video {it.path!r}")
        if not it.k < manifest.frames:
            raise FormatError(f"manifest item {it.id!r} has k >= frames")
    return manifest
