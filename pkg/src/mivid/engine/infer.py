"""Frame interpolation from a trained checkpoint."""

from __future__ import annotations

import json
import logging
import shutil
from pathlib import Path
from typing import Optional

import torch
from PIL import Image

from mivid.diffusion import sample
from mivid.engine.checkpoint import load_checkpoint
from mivid.errors import ConfigError, DataError
from mivid.masking import MaskVector
from mivid.videodata import VideoSegment, frame_name, list_frames, load_frame, save_frame

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def parse_mask_spec(spec: str, T: int) -> MaskVector:
    """``"0010100"`` bit string, or comma-separated frame indices such as ``"2,4"``."""
    s = spec.strip()
    if s and set(s) <= {"0", "1"} and len(s) == T:
        return MaskVector(tuple(int(c) for c in s))
    try:
        idx = [int(p) for p in s.split(",") if p.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse mask spec {spec!r}") from None
    if any(i <= 0 or i >= T - 1 for i in idx):
        raise ConfigError(f"mask indices {idx} must be strictly between 0 and {T - 1}")
    return MaskVector.from_indices(T, idx)


def _frame_size(path) -> tuple:
    with Image.open(path) as img:
        return img.size[1], img.size[0]


def interpolate(checkpoint_path, input_dir, out_dir, sigma_mode: Optional[str] = None, seed: int = 0,
                mask: Optional[str] = None, n_between: int = 1) -> dict:
    """Synthesize frames and write them, with a manifest, to ``out_dir``.

    Without ``mask`` every input frame is context and ``n_between`` frames
    are synthesized between each consecutive pair. With ``mask`` the input
    is a full segment and the masked frames are replaced.
    """
    ckpt = load_checkpoint(checkpoint_path)
    cfg = ckpt.config
    model = ckpt.build_model().eval()
    sched = cfg.diffusion.schedule()
    sigma_mode = sigma_mode or cfg.diffusion.sigma_mode

    paths = list_frames(Path(input_dir))
    if mask is None:
        if len(paths) < 2:
            raise DataError(f"need at least two context frames in {input_dir}")
        if n_between < 1:
            raise ConfigError("n_between must be >= 1")
        sources = []
        for i, p in enumerate(paths):
            sources.append(p)
            if i < len(paths) - 1:
                sources.extend([None] * n_between)
        mv = MaskVector(tuple(int(s is None) for s in sources))
    else:
        if len(paths) < 3:
            raise DataError(f"need at least three frames in {input_dir} to apply a mask")
        mv = parse_mask_spec(mask, len(paths))
        sources = [None if b else p for p, b in zip(paths, mv.bits)]

    known = [p for p in sources if p is not None]
    sizes = {_frame_size(p) for p in known}
    target = cfg.data.resize_to
    if target is None:
        if len(sizes) != 1:
            raise ConfigError(f"input frames have mixed sizes {sorted(sizes)} and the model has no fixed resolution")
        target = sizes.pop()
    elif sizes != {tuple(target)}:
        logger.warning("resizing input frames %s to trained resolution %s", sorted(sizes), target)
    f = cfg.model.spatial_factor
    if target[0] % f or target[1] % f:
        raise ConfigError(f"frame size {target} is not divisible by {f}")
    resized = any(s != tuple(target) for s in {_frame_size(p) for p in known})

    C = cfg.model.channels
    frames = torch.zeros((len(sources), C) + tuple(target))
    for k, p in enumerate(sources):
        if p is not None:
            frames[k] = load_frame(p, C, target)
    segment = VideoSegment(frames, Path(input_dir).name)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        result = sample(segment, mv, model, sched, g, sigma_mode, clip_x0=cfg.diffusion.clip_x0)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for k, p in enumerate(sources):
        dest = out / frame_name(k, len(sources))
        if p is not None and not resized and p.suffix.lower() == ".png":
            shutil.copyfile(p, dest)
        else:
            save_frame(result.frames[k], dest)
        outputs.append({"path": str(dest), "synthesized": p is None, "source": None if p is None else str(p)})
    manifest = {
        "checkpoint": str(checkpoint_path),
        "inputs": [str(p) for p in paths],
        "mask": list(mv.bits),
        "outputs": outputs,
        "seed": seed,
        "sigma_mode": sigma_mode,
        "resolution": list(target),
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest
