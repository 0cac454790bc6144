"""Training loop: hybrid masking, masked forward noising, composite loss, Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import torch

from mivid.diffusion import forward_noise, mask_tensor, reconstruct_x0
from mivid.engine.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from mivid.engine.config import TrainingConfig, dump_config
from mivid.engine.optim import AdamState, adam_step, clip_grad_norm, lr_at
from mivid.errors import ConfigError, DataError, NumericError
from mivid.features import get_backend
from mivid.losses import scheduled_weights, training_loss
from mivid.masking import hybrid_mask
from mivid.model import init_params
from mivid.videodata import VideoSegment, load_segments

logger = logging.getLogger(__name__)

LOG_HEADER = "step,epoch,lr,loss_total,loss_diff,loss_pix,loss_perc,loss_lpips"
CHECKPOINT_NAME = "checkpoint.mivd"
LOG_NAME = "train_log.csv"


def epoch_permutation(n: int, seed: int, epoch: int) -> torch.Tensor:
    """Sampling order for one epoch, a pure function of ``(seed, epoch)``."""
    g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
    return torch.randperm(n, generator=g)


def steps_per_epoch(n_segments: int, batch_size: int) -> int:
    return math.ceil(n_segments / batch_size)


def _stack(segments: Sequence[VideoSegment]) -> torch.Tensor:
    if not segments:
        raise DataError("training set is empty")
    shapes = {tuple(s.frames.shape) for s in segments}
    if len(shapes) != 1:
        raise DataError(f"segments have mixed shapes {sorted(shapes)}; set data.resize")
    return torch.stack([s.frames for s in segments])


@dataclass
class StepRecord:
    step: int
    epoch: int
    lr: float
    total: float
    diff: float
    pix: float
    perc: float
    lpips: float

    def as_list(self) -> list:
        return [self.step, self.epoch, self.lr, self.total, self.diff, self.pix, self.perc, self.lpips]

    def log_line(self) -> str:
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in self.as_list())


def train(cfg: TrainingConfig, resume=None, max_steps: Optional[int] = None,
          segments: Optional[Sequence[VideoSegment]] = None, out_dir=None) -> Checkpoint:
    """Run (or continue) training and return the final checkpoint.

    ``segments`` overrides loading from ``cfg.data``. ``max_steps`` stops
    early, as an interrupted run would; the saved checkpoint resumes exactly.
    """
    if cfg.deterministic:
        torch.set_num_threads(1)
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / CHECKPOINT_NAME
    log_path = out / LOG_NAME

    data = _stack(list(segments) if segments is not None else load_segments(cfg.data))
    if data.shape[2] != cfg.model.channels:
        raise ConfigError(f"data has {data.shape[2]} channels, model expects {cfg.model.channels}")
    n = data.shape[0]
    spe = steps_per_epoch(n, cfg.batch_size)
    total_steps = cfg.epochs * spe

    sched = cfg.diffusion.schedule()
    backend = get_backend(cfg.loss.backend)
    model = init_params(cfg.model, cfg.seed)
    params = dict(model.named_parameters())
    rng = torch.Generator().manual_seed(cfg.seed)
    state = AdamState.zeros_like({k: p.detach() for k, p in params.items()})
    history: List[list] = []
    start = 0

    if resume is not None:
        prev = load_checkpoint(resume, cfg.model)
        if dump_config(prev.config) != dump_config(cfg):
            logger.warning("resuming with a config that differs from the checkpoint's")
        with torch.no_grad():
            for k, p in params.items():
                p.copy_(prev.params[k])
        state = AdamState(prev.step, {k: v.clone() for k, v in prev.adam_m.items()},
                          {k: v.clone() for k, v in prev.adam_v.items()})
        rng.set_state(torch.frombuffer(bytearray(prev.rng_state), dtype=torch.uint8))
        history = [list(h) for h in prev.loss_history]
        start = prev.step
        log_mode = "a"
    else:
        log_mode = "w"

    stop = total_steps if max_steps is None else min(total_steps, max_steps)
    epoch = start // spe

    def snapshot(step: int, ep: int) -> Checkpoint:
        return Checkpoint(
            config=cfg,
            step=step,
            epoch=ep,
            params={k: v.detach().clone() for k, v in model.state_dict().items()},
            adam_m={k: v.clone() for k, v in state.m.items()},
            adam_v={k: v.clone() for k, v in state.v.items()},
            rng_state=bytes(rng.get_state().numpy().tobytes()),
            loss_history=[list(h) for h in history],
        )

    last_good = ckpt_path if resume is not None or ckpt_path.exists() else None
    with open(log_path, log_mode) as log:
        if log_mode == "w":
            log.write(LOG_HEADER + "\n")
        for step in range(start + 1, stop + 1):
            epoch, b = divmod(step - 1, spe)
            perm = epoch_permutation(n, cfg.seed, epoch)
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            x0 = data[idx]

            masks = torch.stack([
                hybrid_mask(VideoSegment(clip), epoch, cfg.mask, rng).as_tensor(torch.bool) for clip in x0
            ])
            if cfg.timestep_sampling == "per_element":
                t = torch.randint(1, sched.T_d + 1, (x0.shape[0],), generator=rng)
            else:
                t = torch.randint(1, sched.T_d + 1, (1,), generator=rng).expand(x0.shape[0])
            z_t, eps = forward_noise(x0, masks, t, sched, rng)
            m = mask_tensor(masks, x0)
            context = torch.where(m, torch.zeros((), dtype=x0.dtype), x0)
            eps_hat = model(z_t, context, t)
            x_hat = reconstruct_x0(z_t, eps_hat, t, m, sched).clamp(0.0, 1.0)

            weights = scheduled_weights(cfg.loss, (step - 1) / total_steps)
            lr = lr_at(step - 1, total_steps, cfg.lr, cfg.lr_schedule, cfg.warmup_steps)
            try:
                report = training_loss(eps, eps_hat, x_hat, x0, m, backend, weights)
                model.zero_grad(set_to_none=False)
                report.total.backward()
                grads = {k: p.grad for k, p in params.items()}
                clip_grad_norm(grads.values(), cfg.grad_clip)
                adam_step({k: p.data for k, p in params.items()}, grads, state, lr, cfg.betas)
            except NumericError as exc:
                raise NumericError(f"step {step}: {exc}", last_checkpoint=last_good) from exc

            vals = report.item()
            rec = StepRecord(step, epoch, lr, vals["total"], vals["diff"], vals["pix"], vals["perc"], vals["lpips"])
            history.append(rec.as_list())
            log.write(rec.log_line() + "\n")
            if step % cfg.checkpoint_every == 0 and step != stop:
                save_checkpoint(snapshot(step, epoch), ckpt_path)
                last_good = ckpt_path
                log.flush()

    final = snapshot(max(stop, start), epoch)
    save_checkpoint(final, ckpt_path)
    return final


def read_log(path) -> List[list]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != LOG_HEADER:
            raise DataError(f"unexpected log header in {path}")
        for line in fh:
            if line.strip():
                parts = line.strip().split(",")
                rows.append([int(parts[0]), int(parts[1])] + [float(p) for p in parts[2:]])
    return rows
