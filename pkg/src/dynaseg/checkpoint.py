"""Checkpoint container: magic "DMSA", version, JSON header, float64 blocks.

Layout: 4 magic bytes, u32 format version (little-endian), u32 header
length, UTF-8 JSON header, then the flat little-endian float64 parameter
blocks in header order. The header records counters, every tensor's name
and shape, and a CRC32 over the concatenated blocks. Save/load/save is
byte-identical.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"DMSA"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


@dataclass
class ModelState:
    """Student/teacher parameter trees, optimizer moments, CAM prototypes, counters."""

    student: dict[str, Tensor]
    teacher: dict[str, Tensor]
    momentum: dict[str, np.ndarray]
    alpha: np.ndarray
    epoch: int
    step: int

    def __post_init__(self):
        if set(self.student) != set(self.teacher):
            raise CheckpointError("student and teacher parameter trees have different keys")
        for name, s in self.student.items():
            if s.shape != self.teacher[name].shape:
                raise CheckpointError(
                    f"teacher/student shape mismatch for {name}: "
                    f"{self.teacher[name].shape} vs {s.shape}"
                )


def write_arrays(path, arrays: dict[str, np.ndarray], counters: dict[str, int]) -> None:
    """Serialize named float64 arrays in insertion order."""
    blocks = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    header = {
        "counters": dict(counters),
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in arrays.items()],
        "checksum": zlib.crc32(blocks),
    }
    head = json.dumps(header, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        f.write(head)
        f.write(blocks)


def read_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, int]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError("truncated file: header fields missing")
    version, head_len = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"format version {version} unsupported (expected {FORMAT_VERSION})")
    if len(raw) < 12 + head_len:
        raise CheckpointError("truncated file: JSON header incomplete")
    try:
        header = json.loads(raw[12 : 12 + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None

    blocks = raw[12 + head_len :]
    if header.get("checksum") != zlib.crc32(blocks):
        raise CheckpointError("checksum failure: parameter blocks corrupted")

    arrays: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(blocks):
            raise CheckpointError(
                f"tensor {name}: declared shape {shape} needs {nbytes} bytes, "
                f"only {len(blocks) - offset} remain"
            )
        arrays[name] = (
            np.frombuffer(blocks, dtype="<f8", count=count, offset=offset)
            .reshape(shape)
            .astype(np.float64)
        )
        offset += nbytes
    if offset != len(blocks):
        raise CheckpointError(f"{len(blocks) - offset} trailing bytes after declared tensors")
    return arrays, {k: int(v) for k, v in header.get("counters", {}).items()}


def checkpoint_save(state: ModelState, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, t in state.student.items():
        arrays[f"student/{name}"] = t.data
    for name, t in state.teacher.items():
        arrays[f"teacher/{name}"] = t.data
    for name, v in state.momentum.items():
        arrays[f"momentum/{name}"] = v
    arrays["alpha"] = state.alpha
    write_arrays(path, arrays, {"epoch": state.epoch, "step": state.step})


def checkpoint_load(path) -> ModelState:
    arrays, counters = read_arrays(path)
    student: dict[str, Tensor] = {}
    teacher: dict[str, Tensor] = {}
    momentum: dict[str, np.ndarray] = {}
    alpha = None
    for name, arr in arrays.items():
        group, _, key = name.partition("/")
        if group == "student":
            student[key] = Tensor(arr, requires_grad=True)
        elif group == "teacher":
            teacher[key] = Tensor(arr, requires_grad=True)
        elif group == "momentum":
            momentum[key] = arr.copy()
        elif name == "alpha":
            alpha = arr.copy()
        else:
            raise CheckpointError(f"unrecognized tensor group in {name!r}")
    if alpha is None:
        raise CheckpointError("checkpoint is missing the CAM prototype block 'alpha'")
    return ModelState(
        student=student,
        teacher=teacher,
        momentum=momentum,
        alpha=alpha,
        epoch=counters.get("epoch", 0),
        step=counters.get("step", 0),
    )
