"""Run configuration and its flat ``section.key = value`` text format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple

from mivid.diffusion import SCHEDULE_KINDS, SIGMA_MODES, NoiseSchedule, build_schedule
from mivid.errors import ConfigError
from mivid.losses import LossWeights
from mivid.masking import MaskConfig
from mivid.model import ModelConfig
from mivid.videodata import DatasetSpec

LR_SCHEDULES = ("constant", "cosine_anneal")
TIMESTEP_SAMPLING = ("per_element", "per_batch")


@dataclass(frozen=True)
class DiffusionConfig:
    T_d: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"
    sigma_mode: str = "posterior"
    clip_x0: bool = True

    def __post_init__(self):
        if self.sigma_mode not in SIGMA_MODES:
            raise ConfigError(f"sigma_mode must be one of {SIGMA_MODES}")
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"kind must be one of {SCHEDULE_KINDS}")

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.kind, self.T_d, self.beta_start, self.beta_end)


@dataclass(frozen=True)
class TrainingConfig:
    data: DatasetSpec
    mask: MaskConfig = field(default_factory=MaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    lr_schedule: str = "cosine_anneal"
    warmup_steps: int = 0
    seed: int = 42
    checkpoint_every: int = 100
    grad_clip: float = 1.0
    timestep_sampling: str = "per_element"
    deterministic: bool = True
    out_dir: str = "runs/mivid"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}")
        if self.warmup_steps < 0:
            raise ConfigError("warmup_steps must be >= 0")
        if self.timestep_sampling not in TIMESTEP_SAMPLING:
            raise ConfigError(f"timestep_sampling must be one of {TIMESTEP_SAMPLING}")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.model.channels != self.data.channels:
            raise ConfigError("model channels must equal data.channels")
        if self.mask.E_max != self.epochs:
            raise ConfigError("mask E_max must equal the number of training epochs")
        if self.data.resize_to is not None:
            f = self.model.spatial_factor
            if self.data.resize_to[0] % f or self.data.resize_to[1] % f:
                raise ConfigError(f"data.resize {self.data.resize_to} not divisible by 2^(levels-1) = {f}")


# --- value codecs -------------------------------------------------------------

def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _size(s: str):
    if s.strip().lower() == "none":
        return None
    parts = [p for p in s.replace("x", ",").split(",") if p.strip()]
    if len(parts) != 2:
        raise ValueError(f"expected H,W, got {s!r}")
    return (int(parts[0]), int(parts[1]))


def _floats(s: str):
    return tuple(float(p) for p in s.split(","))


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


# key -> (section, field name, parser)
KEYS: Dict[str, Tuple[str, str, Callable[[str], Any]]] = {
    "data.root": ("data", "root_path", str),
    "data.segment_length": ("data", "segment_length", int),
    "data.resize": ("data", "resize_to", _size),
    "data.channels": ("data", "channels", int),
    "data.seed": ("data", "seed", int),
    "data.split": ("data", "split", str),
    "data.split_fractions": ("data", "split_fractions", _floats),
    "mask.p_r": ("mask", "p_r", float),
    "mask.p_m": ("mask", "p_m", float),
    "mask.p_min": ("mask", "p_min", float),
    "mask.p_max": ("mask", "p_max", float),
    "mask.ramp": ("mask", "ramp", str),
    "mask.fill": ("mask", "fill", str),
    "mask.constant_value": ("mask", "constant_value", float),
    "diffusion.T_d": ("diffusion", "T_d", int),
    "diffusion.beta_start": ("diffusion", "beta_start", float),
    "diffusion.beta_end": ("diffusion", "beta_end", float),
    "diffusion.kind": ("diffusion", "kind", str),
    "diffusion.sigma_mode": ("diffusion", "sigma_mode", str),
    "diffusion.clip_x0": ("diffusion", "clip_x0", _bool),
    "model.base_channels": ("model", "base_channels", int),
    "model.levels": ("model", "levels", int),
    "model.heads": ("model", "attention_heads", int),
    "model.time_embed_dim": ("model", "time_embed_dim", int),
    "loss.lambda_mse": ("loss", "lambda_mse", float),
    "loss.lambda_l1": ("loss", "lambda_l1", float),
    "loss.lambda_perc": ("loss", "lambda_perc", float),
    "loss.lambda_lpips": ("loss", "lambda_lpips", float),
    "loss.adaptive_ramp": ("loss", "adaptive_ramp", _bool),
    "loss.backend": ("loss", "backend", str),
    "train.epochs": ("train", "epochs", int),
    "train.batch_size": ("train", "batch_size", int),
    "train.lr": ("train", "lr", float),
    "train.beta1": ("train", "beta1", float),
    "train.beta2": ("train", "beta2", float),
    "train.lr_schedule": ("train", "lr_schedule", str),
    "train.warmup_steps": ("train", "warmup_steps", int),
    "train.seed": ("train", "seed", int),
    "train.checkpoint_every": ("train", "checkpoint_every", int),
    "train.grad_clip": ("train", "grad_clip", float),
    "train.timestep_sampling": ("train", "timestep_sampling", str),
    "train.deterministic": ("train", "deterministic", _bool),
    "train.out_dir": ("train", "out_dir", str),
}


def build_config(values: Optional[Dict[str, Any]] = None) -> TrainingConfig:
    """Assemble a config from already-typed ``section.key`` values over the defaults."""
    sections: Dict[str, Dict[str, Any]] = {s: {} for s in ("data", "mask", "diffusion", "model", "loss", "train")}
    for key, value in (values or {}).items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        section, name, _ = KEYS[key]
        sections[section][name] = value
    train = sections["train"]
    if "beta1" in train or "beta2" in train:
        train["betas"] = (float(train.pop("beta1", 0.9)), float(train.pop("beta2", 0.999)))
    try:
        data = DatasetSpec(**{"root_path": "data", **sections["data"]})
        epochs = int(train.get("epochs", 100))
        return TrainingConfig(
            data=data,
            mask=MaskConfig(E_max=epochs, **sections["mask"]),
            model=ModelConfig(channels=data.channels, **sections["model"]),
            diffusion=DiffusionConfig(**sections["diffusion"]),
            loss=LossWeights(**sections["loss"]),
            **train,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_config_text(text: str) -> TrainingConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            values[key] = KEYS[key][2](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    return build_config(values)


def load_config(path) -> TrainingConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def config_values(cfg: TrainingConfig) -> Dict[str, Any]:
    sections = {
        "data": cfg.data,
        "mask": cfg.mask,
        "diffusion": cfg.diffusion,
        "model": cfg.model,
        "loss": cfg.loss,
    }
    train = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg) if f.name not in sections}
    train["beta1"], train["beta2"] = train.pop("betas")
    sections["train"] = train
    out = {}
    for key, (section, name, _) in KEYS.items():
        obj = sections[section]
        out[key] = obj[name] if isinstance(obj, dict) else getattr(obj, name)
    return out


def dump_config(cfg: TrainingConfig) -> str:
    """Canonical text form; ``parse_config_text(dump_config(c)) == c``."""
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in config_values(cfg).items())
