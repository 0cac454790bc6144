"""Mask-pattern grids and loss curves for inspection."""

from __future__ import annotations

import random
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from mivid.masking import curriculum_rate, hybrid_mask
from mivid.videodata import VideoSegment, load_segments, toy_segment

CELL = 16
# endpoint, unmasked, then one color per strategy (mixed tags blend)
COLORS = {
    "endpoint": (60, 60, 60),
    "visible": (235, 235, 235),
    "random": (220, 60, 60),
    "motion": (60, 160, 220),
    "curriculum": (90, 190, 90),
    "forced": (230, 170, 40),
}


def _cell_color(tags: frozenset) -> tuple:
    cols = np.array([COLORS[t] for t in sorted(tags)], dtype=np.float64)
    return tuple(int(c) for c in cols.mean(axis=0).round())


def mask_grid(cfg, out_path, rows: int = 8, seed: int = 0) -> np.ndarray:
    """One row per sample across the curriculum (epoch 0 to E_max), one column per frame."""
    try:
        segment = load_segments(cfg.data)[0]
    except Exception:
        H, W = cfg.data.resize_to or (16, 16)
        segment = toy_segment(random.Random(seed), cfg.data.segment_length, max(H, 8), max(W, 8))
    T = segment.T
    g = torch.Generator().manual_seed(seed)
    img = np.zeros((rows * CELL, T * CELL, 3), dtype=np.uint8)
    for r in range(rows):
        e = round(r * cfg.mask.E_max / max(rows - 1, 1))
        m = hybrid_mask(segment, e, cfg.mask, g)
        for t in range(T):
            if t in (0, T - 1):
                color = COLORS["endpoint"]
            elif m.bits[t]:
                color = _cell_color(m.strategy_tags[t])
            else:
                color = COLORS["visible"]
            img[r * CELL:(r + 1) * CELL - 1, t * CELL:(t + 1) * CELL - 1] = color
    Image.fromarray(img).save(out_path)
    return img


def plot_history(history_path, out_path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from mivid.engine.checkpoint import load_checkpoint
    from mivid.engine.train import read_log

    p = Path(history_path)
    rows = read_log(p) if p.suffix == ".csv" else load_checkpoint(p).loss_history
    steps = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, label in enumerate(("total", "diff", "pix", "perc", "lpips")):
        ax.plot(steps, [r[3 + i] for r in rows], label=label, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)
