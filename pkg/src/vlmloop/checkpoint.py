"""Binary checkpoint format.

Layout (all little-endian):
  magic   b"LVLM"
  u32     format version
  u64     config hash
  u64     training step
  u32     tensor count, then per tensor:
            u16 name length, utf-8 name, u8 ndim, u32 per dim, f32 raw data
  u8      optimizer-state flag (0/1); when 1:
            u64 optimizer step, u32 entry count, entries as above

Round-trips are bitwise lossless for float32 stores; saving a float64 model
narrows it and is refused unless `allow_narrowing` is set.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"LVLM"
VERSION = 1


@dataclass
class Checkpoint:
    config_hash: int
    step: int
    tensors: dict[str, np.ndarray]
    opt_step: int = 0
    opt_tensors: dict[str, np.ndarray] | None = None
    version: int = VERSION


def from_params(params: dict[str, Tensor], config_hash: int, step: int,
                optimizer=None) -> Checkpoint:
    tensors = {name: t.data for name, t in params.items()}
    opt_tensors = None
    opt_step = 0
    if optimizer is not None:
        opt_tensors = dict(optimizer.state_tensors())
        opt_step = optimizer.t
    return Checkpoint(config_hash=config_hash, step=step, tensors=tensors,
                      opt_step=opt_step, opt_tensors=opt_tensors)


def _write_table(out: list[bytes], table: dict[str, np.ndarray], allow_narrowing: bool) -> None:
    out.append(struct.pack("<I", len(table)))
    for name, arr in table.items():
        if arr.dtype != np.float32:
            if not allow_narrowing:
                raise CheckpointError(
                    f"{name} is {arr.dtype}; checkpoints store float32 (pass allow_narrowing)")
            arr = arr.astype(np.float32)
        nb = name.encode("utf-8")
        out.append(struct.pack("<H", len(nb)))
        out.append(nb)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save(ckpt: Checkpoint, path: str | Path, allow_narrowing: bool = False) -> None:
    out: list[bytes] = [MAGIC, struct.pack("<I", ckpt.version),
                        struct.pack("<Q", ckpt.config_hash),
                        struct.pack("<Q", ckpt.step)]
    _write_table(out, ckpt.tensors, allow_narrowing)
    if ckpt.opt_tensors is not None:
        out.append(struct.pack("<B", 1))
        out.append(struct.pack("<Q", ckpt.opt_step))
        _write_table(out, ckpt.opt_tensors, allow_narrowing)
    else:
        out.append(struct.pack("<B", 0))
    Path(path).write_bytes(b"".join(out))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        vals = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals


def _read_table(r: _Reader) -> dict[str, np.ndarray]:
    count = r.unpack("<I")
    table: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        ndim = r.unpack("<B")
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim)) if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).copy()
        table[name] = data
    return table


def load(path: str | Path, expect_hash: int | None = None, force: bool = False) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    version = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    config_hash = r.unpack("<Q")
    if expect_hash is not None and config_hash != expect_hash and not force:
        raise CheckpointError(
            f"{path}: config hash {config_hash:#x} != expected {expect_hash:#x} (use force to override)")
    step = r.unpack("<Q")
    tensors = _read_table(r)
    opt_tensors = None
    opt_step = 0
    if r.unpack("<B"):
        opt_step = r.unpack("<Q")
        opt_tensors = _read_table(r)
    return Checkpoint(config_hash=config_hash, step=step, tensors=tensors,
                      opt_step=opt_step, opt_tensors=opt_tensors, version=version)


def load_into(params: dict[str, Tensor], ckpt: Checkpoint, strict: bool = False) -> list[str]:
    """Copy checkpoint tensors into matching parameters; returns loaded names."""
    for name, arr in ckpt.tensors.items():
        if name not in params:
            if strict:
                raise CheckpointError(f"checkpoint tensor {name} absent from model")
            continue
        p = params[name]
        if p.data.shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != model {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return [n for n in ckpt.tensors if n in params]
