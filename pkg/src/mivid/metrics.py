"""PSNR, SSIM and LPIPS-style frame metrics plus directory evaluation.

Frames are ``[C, H, W]`` arrays in ``[0, 1]`` so the dynamic range is
``L = 1``. PSNR depends only on MSE / L**2, so the dB values equal those of
the 8-bit convention with ``L = 255`` on rescaled frames.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from mivid.errors import DataError, MetricError
from mivid.features import FeatureBackend, get_backend, lpips_distance
from mivid.videodata import list_frames, load_frame

PSNR_CAP_DB = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

CSV_HEADER = ["sequence", "frame", "psnr_db", "ssim", "lpips"]

_FRAME_RE = re.compile(r"(\d+)(?=\.[^.]+$)")


def _as_array(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None]
    return a


def psnr(pred, gt, L: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP_DB`` for identical frames."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    if L <= 0:
        raise MetricError("L must be positive")
    mse = float(np.mean((p - g) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(L * L / mse))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian weights."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(pred, gt, L: float = 1.0, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2,
             sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Per-channel local SSIM over all valid window positions, ``[C, H-w+1, W-w+1]``."""
    p, g = _as_array(pred), _as_array(gt)
    if p.shape != g.shape:
        raise MetricError(f"shape mismatch {p.shape} vs {g.shape}")
    if window % 2 != 1 or window < 1:
        raise MetricError(f"SSIM window must be odd, got {window}")
    if p.shape[-1] < window or p.shape[-2] < window:
        raise MetricError(f"frame {p.shape[-2]}x{p.shape[-1]} smaller than SSIM window {window}")
    w = gaussian_window(window, sigma)
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2

    def filt(a):
        return np.tensordot(sliding_window_view(a, (window, window), axis=(-2, -1)), w, axes=([-2, -1], [0, 1]))

    mu_x, mu_y = filt(p), filt(g)
    var_x = filt(p * p) - mu_x ** 2
    var_y = filt(g * g) - mu_y ** 2
    cov = filt(p * g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return num / den


def ssim(pred, gt, L: float = 1.0, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2) -> float:
    return float(ssim_map(pred, gt, L, window, k1, k2).mean())


def lpips_metric(pred, gt, backend: FeatureBackend) -> float:
    """Weighted normalized-activation distance for one frame (same code path as the loss)."""
    p = torch.as_tensor(_as_array(pred))[None]
    g = torch.as_tensor(_as_array(gt))[None]
    with torch.no_grad():
        return float(lpips_distance(p, g, backend)[0])


@dataclass(frozen=True)
class FrameMetrics:
    sequence: str
    frame: int
    psnr_db: float
    ssim: float
    lpips: float


@dataclass
class MetricsReport:
    per_frame: List[FrameMetrics] = field(default_factory=list)
    L: float = 1.0
    backend: str = ""

    @property
    def aggregate(self) -> dict:
        n = len(self.per_frame)
        if n == 0:
            return {"psnr_db": float("nan"), "ssim": float("nan"), "lpips": float("nan")}
        return {
            key: math.fsum(getattr(f, key) for f in self.per_frame) / n
            for key in ("psnr_db", "ssim", "lpips")
        }

    def write_csv(self, path) -> None:
        agg = self.aggregate
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for f in self.per_frame:
                w.writerow([f.sequence, f.frame, repr(f.psnr_db), repr(f.ssim), repr(f.lpips)])
            w.writerow(["aggregate", "", repr(agg["psnr_db"]), repr(agg["ssim"]), repr(agg["lpips"])])
            # trailing metadata; 255-range PSNR is identical in dB
            fh.write(f"# L={self.L!r}\n# backend={self.backend}\n")

    @classmethod
    def read_csv(cls, path) -> "MetricsReport":
        meta = {}
        rows = []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    meta[k.strip()] = v.strip()
                else:
                    rows.append(line)
        reader = csv.reader(rows)
        header = next(reader)
        if header != CSV_HEADER:
            raise DataError(f"unexpected report header {header}")
        frames = [
            FrameMetrics(r[0], int(r[1]), float(r[2]), float(r[3]), float(r[4]))
            for r in reader
            if r and r[0] != "aggregate"
        ]
        return cls(frames, float(meta.get("L", 1.0)), meta.get("backend", ""))


def _frame_index(path: Path) -> int:
    m = _FRAME_RE.search(path.name)
    return int(m.group(1)) if m else -1


def _sequences(root: Path) -> dict:
    return {p.name: list_frames(p) for p in sorted(root.iterdir()) if p.is_dir()}


def evaluate_directory(pred_dir, gt_dir, center_only: bool = True, backend: Optional[FeatureBackend] = None,
                       out_path=None) -> MetricsReport:
    """Score predicted sequences against ground truth with the same directory layout.

    With ``center_only`` only the middle frame of each ground-truth sequence
    is scored; otherwise every frame, and both sides must hold the same
    frame files.
    """
    pred_root, gt_root = Path(pred_dir), Path(gt_dir)
    for root in (pred_root, gt_root):
        if not root.is_dir():
            raise DataError(f"not a directory: {root}")
    backend = backend or get_backend("proxy")
    pred_seqs, gt_seqs = _sequences(pred_root), _sequences(gt_root)
    problems = [f"missing prediction for sequence {s}" for s in gt_seqs if s not in pred_seqs]
    problems += [f"no ground truth for sequence {s}" for s in pred_seqs if s not in gt_seqs]
    pairs = []
    for seq in sorted(set(gt_seqs) & set(pred_seqs)):
        gt_frames = gt_seqs[seq]
        pred_by_name = {p.name: p for p in pred_seqs[seq]}
        if center_only:
            if not gt_frames:
                problems.append(f"sequence {seq} has no ground-truth frames")
                continue
            chosen = [gt_frames[len(gt_frames) // 2]]
        else:
            extra = sorted(set(pred_by_name) - {p.name for p in gt_frames})
            problems += [f"{seq}/{name} has no ground truth" for name in extra]
            chosen = gt_frames
        for g in chosen:
            if g.name not in pred_by_name:
                problems.append(f"missing prediction {seq}/{g.name}")
            else:
                pairs.append((seq, pred_by_name[g.name], g))
    if problems:
        raise DataError("prediction/ground-truth structure mismatch: " + "; ".join(problems))

    report = MetricsReport(L=1.0, backend=getattr(backend, "name", type(backend).__name__))
    for seq, p_path, g_path in pairs:
        gt = load_frame(g_path, 3)
        pred = load_frame(p_path, 3, resize_to=tuple(gt.shape[-2:]))
        report.per_frame.append(
            FrameMetrics(seq, _frame_index(g_path), psnr(pred, gt), ssim(pred, gt), lpips_metric(pred, gt, backend))
        )
    if out_path is not None:
        report.write_csv(out_path)
    return report
