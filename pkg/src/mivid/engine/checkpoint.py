"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"MIVD"  u32 format_version
    u32 n, n bytes   config text (flat key = value)
    u32 n, n bytes   metadata JSON (step, epoch, rng state, loss history)
    u32 n_tensors
    n_tensors x { u16 name_len, name, u8 rank, rank x u32 dims, u8 dtype tag }
    tensor payloads, float32 little-endian, in manifest order
    32-byte SHA-256 of everything above
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from mivid.engine.config import TrainingConfig, dump_config, parse_config_text
from mivid.errors import CheckpointError, MividError
from mivid.model import ModelConfig, NoisePredictor

MAGIC = b"MIVD"
FORMAT_VERSION = 1
DTYPE_F32 = 1
DIGEST_SIZE = 32

MODEL_PREFIX = "model."
M_PREFIX = "adam_m."
V_PREFIX = "adam_v."


@dataclass
class Checkpoint:
    config: TrainingConfig
    step: int
    epoch: int
    params: Dict[str, torch.Tensor]
    adam_m: Dict[str, torch.Tensor] = field(default_factory=dict)
    adam_v: Dict[str, torch.Tensor] = field(default_factory=dict)
    rng_state: bytes = b""
    loss_history: List[list] = field(default_factory=list)
    format_version: int = FORMAT_VERSION

    def build_model(self) -> NoisePredictor:
        model = NoisePredictor(self.config.model)
        model.load_state_dict(self.params)
        return model


def _tensor_items(ckpt: Checkpoint):
    for prefix, group in ((MODEL_PREFIX, ckpt.params), (M_PREFIX, ckpt.adam_m), (V_PREFIX, ckpt.adam_v)):
        for name, t in group.items():
            yield prefix + name, t


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", ckpt.format_version))
    for blob in (dump_config(ckpt.config).encode(), _meta_json(ckpt).encode()):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    items = list(_tensor_items(ckpt))
    buf.write(struct.pack("<I", len(items)))
    for name, t in items:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(struct.pack("<B", DTYPE_F32))
    for _, t in items:
        buf.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def _meta_json(ckpt: Checkpoint) -> str:
    meta = {
        "epoch": ckpt.epoch,
        "loss_history": ckpt.loss_history,
        "rng_state": base64.b64encode(ckpt.rng_state).decode("ascii"),
        "step": ckpt.step,
    }
    return json.dumps(meta, sort_keys=True, separators=(",", ":"))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_checkpoint(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def expected_shapes(model_cfg: ModelConfig) -> Dict[str, tuple]:
    return {k: tuple(v.shape) for k, v in NoisePredictor(model_cfg).state_dict().items()}


def decode_checkpoint(data: bytes, expected_model: Optional[ModelConfig] = None) -> Checkpoint:
    if len(data) < len(MAGIC) + DIGEST_SIZE:
        raise CheckpointError("truncated checkpoint: file too short")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: file is corrupt or truncated")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    try:
        config = parse_config_text(r.take(n).decode())
    except MividError as exc:
        raise CheckpointError(f"invalid embedded config: {exc}") from exc
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    (n_tensors,) = r.unpack("<I")
    manifest = []
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        (tag,) = r.unpack("<B")
        if tag != DTYPE_F32:
            raise CheckpointError(f"tensor {name}: unsupported dtype tag {tag}")
        manifest.append((name, tuple(dims)))

    shapes = expected_shapes(expected_model or config.model)
    by_name = dict(manifest)
    for pname, shape in shapes.items():
        got = by_name.get(MODEL_PREFIX + pname)
        if got != shape:
            raise CheckpointError(f"tensor {pname}: expected shape {shape}, found {got}")
    extra = [n for n, _ in manifest if n.startswith(MODEL_PREFIX) and n[len(MODEL_PREFIX):] not in shapes]
    if extra:
        raise CheckpointError(f"unexpected tensor {extra[0]}")

    groups = {MODEL_PREFIX: {}, M_PREFIX: {}, V_PREFIX: {}}
    for name, dims in manifest:
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        for prefix, group in groups.items():
            if name.startswith(prefix):
                group[name[len(prefix):]] = torch.from_numpy(arr.copy())
                break
        else:
            raise CheckpointError(f"unknown tensor group for {name}")
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after tensor payloads")
    return Checkpoint(
        config=config,
        step=int(meta["step"]),
        epoch=int(meta["epoch"]),
        params=groups[MODEL_PREFIX],
        adam_m=groups[M_PREFIX],
        adam_v=groups[V_PREFIX],
        rng_state=base64.b64decode(meta["rng_state"]),
        loss_history=meta["loss_history"],
        format_version=version,
    )


def load_checkpoint(path, expected_model: Optional[ModelConfig] = None) -> Checkpoint:
    p = Path(path)
    try:
        data = p.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {p}: {exc}") from exc
    return decode_checkpoint(data, expected_model)
