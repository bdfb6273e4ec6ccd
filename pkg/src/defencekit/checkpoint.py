"""Binary checkpoints: magic `DFK1`, little-endian length-prefixed sections
(meta text, tensor table, optimizer table) and a trailing CRC-32.

The meta section is flat `key = value` text carrying the task tag, run
configuration, random-stream state and step/epoch counters; tensors hold
every parameter and persistent buffer; the optimizer table holds Adam moments
keyed by parameter name.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"DFK1"
VERSION = 1

__all__ = ["Checkpoint", "CheckpointError", "TaskMismatchError",
           "save_checkpoint", "load_checkpoint"]


class CheckpointError(RuntimeError):
    """Unreadable, corrupt or incompatible checkpoint file."""


class TaskMismatchError(CheckpointError):
    """Checkpoint belongs to a different task than requested."""


@dataclass
class Checkpoint:
    task: str
    meta: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    # name -> (step count t, first moment, second moment)
    optimizer: dict[str, tuple[int, np.ndarray, np.ndarray]] = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    head = struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint section")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u16()).decode("utf-8")

    def array(self) -> np.ndarray:
        ndim = struct.unpack("<B", self.take(1))[0]
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(self.take(8 * count), dtype="<f8")
        return data.reshape(shape).copy()


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    meta_lines = [f"task = {ckpt.task}"]
    for key, value in ckpt.meta.items():
        meta_lines.append(f"{key} = {value}")
    sections = []
    sections.append("\n".join(meta_lines).encode("utf-8"))

    tensor_blob = struct.pack("<I", len(ckpt.tensors))
    for name in sorted(ckpt.tensors):
        tensor_blob += _pack_str(name) + _pack_array(ckpt.tensors[name])
    sections.append(tensor_blob)

    opt_blob = struct.pack("<I", len(ckpt.optimizer))
    for name in sorted(ckpt.optimizer):
        t, m, v = ckpt.optimizer[name]
        opt_blob += _pack_str(name) + struct.pack("<Q", t) + _pack_array(m) + _pack_array(v)
    sections.append(opt_blob)

    body = MAGIC + struct.pack("<I", VERSION)
    for sec in sections:
        body += struct.pack("<Q", len(sec)) + sec
    body += struct.pack("<I", zlib.crc32(body))
    with open(path, "wb") as fh:
        fh.write(body)


def load_checkpoint(path, expect_task: str | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (missing {MAGIC!r})")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    reader = _Reader(blob[4:-4])
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: version {version} not supported (want {VERSION})")

    meta_raw = reader.take(reader.u64()).decode("utf-8")
    meta: dict[str, str] = {}
    for line in meta_raw.splitlines():
        key, value = line.split(" = ", 1)
        meta[key] = value
    task = meta.pop("task")
    if expect_task is not None and task != expect_task:
        raise TaskMismatchError(
            f"{path}: checkpoint is for task {task!r}, expected {expect_task!r}")

    tensors = {}
    tr = _Reader(reader.take(reader.u64()))
    for _ in range(tr.u32()):
        name = tr.string()
        tensors[name] = tr.array()

    optimizer = {}
    orr = _Reader(reader.take(reader.u64()))
    for _ in range(orr.u32()):
        name = orr.string()
        t = orr.u64()
        m = orr.array()
        v = orr.array()
        optimizer[name] = (t, m, v)

    return Checkpoint(task, meta, tensors, optimizer)
