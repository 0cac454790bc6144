"""Frame-sequence ingestion and the synthetic moving-square dataset.

On disk a dataset is one directory per sequence holding ``frame_<k>.png``
files with zero-padded indices. Frames are loaded as float32 tensors shaped
``[T, C, H, W]`` with values in ``[0, 1]``.
"""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from PIL import Image

from mivid.errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png",)
SPLITS = ("train", "val", "test", "all")

# toy palette, 8-bit
TOY_BACKGROUND = 0
TOY_FOREGROUND = 255


@dataclass(frozen=True)
class VideoSegment:
    frames: torch.Tensor  # [T, C, H, W]
    source_id: str = ""
    frame_indices: tuple = ()

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4:
            raise DataError(f"segment frames must be [T, C, H, W], got shape {tuple(f.shape)}")
        if f.shape[0] < 3:
            raise DataError(f"segment needs at least 3 frames, got {f.shape[0]}")
        if f.shape[1] not in (1, 3):
            raise DataError(f"segment channels must be 1 or 3, got {f.shape[1]}")
        if not torch.isfinite(f).all() or f.min() < 0 or f.max() > 1:
            raise DataError(f"segment {self.source_id!r} has values outside [0, 1]")
        if not self.frame_indices:
            object.__setattr__(self, "frame_indices", tuple(range(f.shape[0])))
        elif len(self.frame_indices) != f.shape[0]:
            raise DataError("frame_indices length does not match frame count")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class DatasetSpec:
    root_path: str
    segment_length: int = 7
    resize_to: Optional[tuple] = (64, 64)
    channels: int = 3
    split: str = "train"
    split_fractions: tuple = (0.60, 0.20, 0.20)
    seed: int = 42

    def __post_init__(self):
        if self.segment_length < 3:
            raise ConfigError("segment_length must be >= 3")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.split not in SPLITS:
            raise ConfigError(f"split must be one of {SPLITS}, got {self.split!r}")
        fr = tuple(float(v) for v in self.split_fractions)
        if len(fr) != 3 or any(v < 0 for v in fr) or not math.isclose(sum(fr), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split_fractions must be three nonnegative values summing to 1, got {fr}")
        object.__setattr__(self, "split_fractions", fr)
        if self.resize_to is not None:
            h, w = (int(v) for v in self.resize_to)
            if h < 1 or w < 1:
                raise ConfigError(f"invalid resize_to {self.resize_to}")
            object.__setattr__(self, "resize_to", (h, w))


@dataclass(frozen=True)
class SequenceRecord:
    sequence_id: str
    frame_paths: tuple = field(default_factory=tuple)


def list_frames(directory: Path) -> list:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def split_records(records: Sequence[SequenceRecord], fractions, seed: int) -> dict:
    """Partition records into train/val/test by a seeded shuffle of sequence ids."""
    ids = [r.sequence_id for r in records]
    random.Random(seed).shuffle(ids)
    n = len(ids)
    n_train = int(round(fractions[0] * n))
    n_val = int(round((fractions[0] + fractions[1]) * n)) - n_train
    chosen = {
        "train": set(ids[:n_train]),
        "val": set(ids[n_train:n_train + n_val]),
        "test": set(ids[n_train + n_val:]),
    }
    # keep the lexicographic order inside each split
    return {name: [r for r in records if r.sequence_id in members] for name, members in chosen.items()}


def scan_dataset(spec: DatasetSpec) -> list:
    """Return the sorted sequence records belonging to ``spec.split``.

    Sequences with fewer than ``segment_length`` frames are skipped with a
    warning. ``split="all"`` returns every usable sequence.
    """
    root = Path(spec.root_path)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")
    usable = []
    for seq_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        frames = list_frames(seq_dir)
        if len(frames) < spec.segment_length:
            logger.warning(
                "skipping sequence %s: %d frames < segment_length %d",
                seq_dir.name, len(frames), spec.segment_length,
            )
            continue
        usable.append(SequenceRecord(seq_dir.name, tuple(str(p) for p in frames)))
    if not usable:
        raise DataError(f"no usable sequences under {root}")
    if spec.split == "all":
        return usable
    return split_records(usable, spec.split_fractions, spec.seed)[spec.split]


def load_frame(path, channels: int, resize_to=None) -> torch.Tensor:
    """Decode one image as a float32 ``[C, H, W]`` tensor in ``[0, 1]``."""
    try:
        with Image.open(path) as img:
            img = img.convert("L" if channels == 1 else "RGB")
            if resize_to is not None and img.size != (resize_to[1], resize_to[0]):
                img = img.resize((resize_to[1], resize_to[0]), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return torch.from_numpy(arr.astype(np.float32) / 255.0)


def load_segment(record: SequenceRecord, spec: DatasetSpec, start: int = 0) -> VideoSegment:
    paths = record.frame_paths[start:start + spec.segment_length]
    if len(paths) < spec.segment_length:
        raise DataError(f"sequence {record.sequence_id} has no window of {spec.segment_length} frames at {start}")
    frames = torch.stack([load_frame(p, spec.channels, spec.resize_to) for p in paths])
    return VideoSegment(frames, record.sequence_id, tuple(range(start, start + len(paths))))


def load_segments(spec: DatasetSpec) -> list:
    """Every non-overlapping window of the split, in record order."""
    out = []
    for rec in scan_dataset(spec):
        for start in range(0, len(rec.frame_paths) - spec.segment_length + 1, spec.segment_length):
            out.append(load_segment(rec, spec, start))
    return out


def frame_name(k: int, n_frames: int) -> str:
    width = max(2, len(str(max(n_frames - 1, 0))))
    return f"frame_{k:0{width}d}.png"


def to_uint8(frame: torch.Tensor) -> np.ndarray:
    """``[C, H, W]`` float in [0, 1] to an HxW or HxWx3 uint8 array."""
    arr = (frame.detach().to(torch.float64).clamp(0, 1) * 255.0).round().to(torch.uint8).numpy()
    return arr[0] if arr.shape[0] == 1 else arr.transpose(1, 2, 0)


def save_frame(frame: torch.Tensor, path) -> None:
    try:
        Image.fromarray(to_uint8(frame)).save(path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def save_segment(frames: torch.Tensor, directory) -> list:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, frame in enumerate(frames):
        p = directory / frame_name(k, frames.shape[0])
        save_frame(frame, p)
        paths.append(p)
    return paths


def render_square(T: int, H: int, W: int, position, velocity, size: int) -> np.ndarray:
    """uint8 ``[T, H, W]`` frames of a square moving with constant integer velocity."""
    frames = np.full((T, H, W), TOY_BACKGROUND, dtype=np.uint8)
    y0, x0 = position
    vy, vx = velocity
    for t in range(T):
        y, x = y0 + vy * t, x0 + vx * t
        ys, xs = max(y, 0), max(x, 0)
        frames[t, ys:max(y + size, 0), xs:max(x + size, 0)] = TOY_FOREGROUND
    return frames


def toy_motion(rng: random.Random, T: int, H: int, W: int, max_speed: int = 1) -> dict:
    """Draw a square size, nonzero integer velocity and a start keeping it in frame."""
    size = rng.randint(max(2, min(H, W) // 5), max(2, min(H, W) // 3))
    velocities = [
        (vy, vx)
        for vy in range(-max_speed, max_speed + 1)
        for vx in range(-max_speed, max_speed + 1)
        if (vy, vx) != (0, 0)
    ]
    vy, vx = rng.choice(velocities)
    span_y, span_x = abs(vy) * (T - 1), abs(vx) * (T - 1)
    if span_y + size > H or span_x + size > W:
        raise DataError(f"{H}x{W} frame too small for {T} frames of motion")
    lo_y = span_y if vy < 0 else 0
    lo_x = span_x if vx < 0 else 0
    y0 = rng.randint(lo_y, lo_y + H - size - span_y)
    x0 = rng.randint(lo_x, lo_x + W - size - span_x)
    return {"position": [y0, x0], "velocity": [vy, vx], "size": size}


def toy_segment(rng: random.Random, T: int, H: int, W: int, source_id: str = "toy") -> VideoSegment:
    m = toy_motion(rng, T, H, W)
    frames = render_square(T, H, W, m["position"], m["velocity"], m["size"])
    return VideoSegment(torch.from_numpy(frames.astype(np.float32) / 255.0)[:, None], source_id)


def make_toy_dataset(out_path, n_sequences: int, T: int, H: int, W: int, seed: int) -> None:
    """Write ``n_sequences`` grayscale moving-square clips plus a ``motion.json`` index."""
    rng = random.Random(seed)
    root = Path(out_path)
    motions = {}
    try:
        root.mkdir(parents=True, exist_ok=True)
        width = max(3, len(str(n_sequences - 1)))
        for i in range(n_sequences):
            seq_id = f"seq_{i:0{width}d}"
            m = toy_motion(rng, T, H, W)
            frames = render_square(T, H, W, m["position"], m["velocity"], m["size"])
            seq_dir = root / seq_id
            seq_dir.mkdir(exist_ok=True)
            for k in range(T):
                Image.fromarray(frames[k]).save(seq_dir / frame_name(k, T))
            motions[seq_id] = m
        (root / "motion.json").write_text(json.dumps(motions, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise DataError(f"cannot write toy dataset to {root}: {exc}") from exc
