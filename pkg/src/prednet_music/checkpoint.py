"""Binary checkpoint files.

Layout (little-endian)::

    b"PNCK"  u16 version  u32 blob_len  blob (UTF-8 JSON config)
    repeated until EOF:
        u16 name_len  name (UTF-8)  u8 rank  u32 dims[rank]  f32 data[prod(dims)]

Tensor names are ``param/<name>``, ``adam.m/<name>`` and ``adam.v/<name>``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ShapeMismatchError
from .model import Adam, ModelConfig, PredNetModel

MAGIC = b"PNCK"
VERSION = 1


@dataclass
class Checkpoint:
    model: PredNetModel
    optimizer: Adam = field(default_factory=Adam)
    train_config: dict = field(default_factory=dict)

    @property
    def step_count(self) -> int:
        return self.optimizer.step_count

    def config_blob(self) -> dict:
        blob = {
            "model": self.model.config.to_dict(),
            "train": self.train_config,
            "optimizer": {
                "lr": self.optimizer.lr,
                "beta1": self.optimizer.beta1,
                "beta2": self.optimizer.beta2,
                "eps": self.optimizer.eps,
                "step_count": self.optimizer.step_count,
            },
        }
        blob["config_hash"] = config_hash({"model": blob["model"], "train": blob["train"]})
        return blob

    @property
    def config_hash(self) -> str:
        return self.config_blob()["config_hash"]


def config_hash(config: dict) -> str:
    text = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _pack_tensor(name: str, array: np.ndarray) -> bytes:
    raw = name.encode()
    dims = array.shape
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", len(dims))
    head += struct.pack(f"<{len(dims)}I", *dims)
    return head + np.ascontiguousarray(array, dtype="<f4").tobytes()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    blob = json.dumps(ckpt.config_blob(), sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(blob)), blob]
    for name, p in ckpt.model.params.items():
        parts.append(_pack_tensor(f"param/{name}", p.data))
    for name in ckpt.model.params:
        if name in ckpt.optimizer.m:
            parts.append(_pack_tensor(f"adam.m/{name}", ckpt.optimizer.m[name]))
            parts.append(_pack_tensor(f"adam.v/{name}", ckpt.optimizer.v[name]))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def done(self) -> bool:
        return self.pos == len(self.raw)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; nothing is returned unless every tensor validates.

    With ``expected`` the stored tensors must also fit that model layout.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (blob_len,) = r.unpack("<I")
    try:
        blob = json.loads(r.take(blob_len).decode())
        model_cfg = ModelConfig.from_dict(blob["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable config blob: {exc}") from exc

    tensors = {}
    while not r.done():
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
        tensors[name] = data.astype(np.float32)

    layout = expected if expected is not None else model_cfg
    model = PredNetModel(layout)
    shapes = model.parameter_shapes()
    for name, shape in shapes.items():
        for prefix in ("param/", "adam.m/", "adam.v/"):
            key = prefix + name
            if key not in tensors:
                if prefix == "param/":
                    raise CheckpointError(f"{path}: missing tensor {key!r}")
                continue
            if tensors[key].shape != shape:
                raise ShapeMismatchError(
                    f"{path}: tensor {key!r} has shape {tensors[key].shape}, model expects {shape}"
                )
    unknown = sorted(k for k in tensors if k.split("/", 1)[-1] not in shapes)
    if unknown:
        raise CheckpointError(f"{path}: unexpected tensor {unknown[0]!r}")

    for name, p in model.params.items():
        p.data = tensors["param/" + name].copy()
    opt_cfg = blob.get("optimizer", {})
    opt = Adam(
        lr=opt_cfg.get("lr", 1e-3),
        beta1=opt_cfg.get("beta1", 0.9),
        beta2=opt_cfg.get("beta2", 0.999),
        eps=opt_cfg.get("eps", 1e-8),
        step_count=opt_cfg.get("step_count", 0),
    )
    for name in shapes:
        if "adam.m/" + name in tensors:
            opt.m[name] = tensors["adam.m/" + name].copy()
            opt.v[name] = tensors["adam.v/" + name].copy()
    ckpt = Checkpoint(model, opt, blob.get("train", {}))
    if "config_hash" in blob and blob["config_hash"] != ckpt.config_hash and expected is None:
        raise CheckpointError(f"{path}: config hash mismatch")
    return ckpt
