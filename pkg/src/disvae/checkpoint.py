"""Binary checkpoint format (DVC1).

Layout, all integers little-endian::

    b"DVC1"
    u32 header length, UTF-8 JSON header {"model": <ModelConfig>, "step": int}
    u32 entry count, then per entry (parameters, then batch-norm buffers):
        u16 name length, UTF-8 name, u8 rank, u32 * rank dims, float32 values
    b"OPT1"
    u32 entry count, then per parameter:
        u16 name length, UTF-8 name, u32 Adam step count, u8 rank, u32 * rank dims,
        float32 first moment, float32 second moment
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .model import DisentangledVAE, ModelConfig

MAGIC = b"DVC1"
OPT_MAGIC = b"OPT1"


def _write_name(buf, name: str):
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _write_shape(buf, shape):
    buf.write(struct.pack("<B", len(shape)))
    buf.write(struct.pack(f"<{len(shape)}I", *shape))


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def checkpoint_bytes(model: DisentangledVAE, step: int) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = json.dumps({"model": model.cfg.to_dict(), "step": int(step)}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    entries = model.state_arrays()
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries.items():
        _write_name(buf, name)
        _write_shape(buf, arr.shape)
        buf.write(_f32(arr))
    params = model.named_parameters()
    named = list(params)
    buf.write(OPT_MAGIC)
    buf.write(struct.pack("<I", len(named)))
    for name, p in named:
        _write_name(buf, name)
        buf.write(struct.pack("<I", p.step_count))
        _write_shape(buf, p.shape)
        buf.write(_f32(p.adam_m))
        buf.write(_f32(p.adam_v))
    return buf.getvalue()


def save_checkpoint(path, model: DisentangledVAE, step: int):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, step))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def name(self) -> str:
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")

    def shape(self) -> tuple:
        (rank,) = self.unpack("<B")
        return self.unpack(f"<{rank}I") if rank else ()

    def array(self, shape) -> np.ndarray:
        count = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)


def load_checkpoint(path) -> tuple[DisentangledVAE, int]:
    """Rebuild the model (parameters, buffers, Adam state) and return it with the step count."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a DVC1 checkpoint")
    (hlen,) = r.unpack("<I")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
        cfg = ModelConfig(**header["model"])
        step = int(header["step"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from exc

    model = DisentangledVAE(cfg, seed=0)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        name = r.name()
        shape = r.shape()
        values = r.array(shape)
        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise CheckpointError(f"{path}: unknown entry {name!r}")
        if target.shape != values.shape:
            raise CheckpointError(f"{path}: {name} has shape {values.shape}, model expects {target.shape}")
        target[...] = values
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"{path}: missing entries {sorted(missing)[:5]}")

    if r.take(4) != OPT_MAGIC:
        raise CheckpointError(f"{path}: missing OPT1 section")
    (count,) = r.unpack("<I")
    for _ in range(count):
        name = r.name()
        (steps,) = r.unpack("<I")
        shape = r.shape()
        m, v = r.array(shape), r.array(shape)
        if name not in params:
            raise CheckpointError(f"{path}: optimizer state for unknown parameter {name!r}")
        p = params[name]
        p.step_count = steps
        p.adam_m[...] = m
        p.adam_v[...] = v
    return model, step
