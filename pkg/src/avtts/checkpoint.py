"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"AVTTS1"  u16 version  u32 header_len  header (UTF-8 JSON, sorted keys)
    tensor payloads, float32 little-endian, in header order
    u32 CRC-32 of everything before it

The header lists every tensor as ``{"name", "shape"}``. Optimizer moments
are stored as tensors named ``adam.m/<param>`` and ``adam.v/<param>``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import is_prosody_param
from .numerics import AdamState

MAGIC = b"AVTTS1"
VERSION = 1
STAGES = ("stage1", "stage2")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model_config: dict
    params: dict[str, np.ndarray]
    stage: str
    step: int = 0
    stats: dict = field(default_factory=dict)
    optimizer: AdamState | None = None
    train_config: dict = field(default_factory=dict)

    def groups(self) -> dict[str, list[str]]:
        return {"backbone": [n for n in self.params if not is_prosody_param(n)],
                "prosody": [n for n in self.params if is_prosody_param(n)]}


def _tensor_list(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = [(name, arr) for name, arr in ckpt.params.items()]
    if ckpt.optimizer is not None:
        items += [(f"adam.m/{n}", a) for n, a in ckpt.optimizer.m.items()]
        items += [(f"adam.v/{n}", a) for n, a in ckpt.optimizer.v.items()]
    return items


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = _tensor_list(ckpt)
    opt = None
    if ckpt.optimizer is not None:
        o = ckpt.optimizer
        opt = {"lr": o.lr, "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps, "step": o.step}
    header = {
        "model_config": ckpt.model_config,
        "stage": ckpt.stage,
        "step": int(ckpt.step),
        "stats": ckpt.stats,
        "optimizer": opt,
        "train_config": ckpt.train_config,
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in tensors)
    blob = MAGIC + struct.pack("<HI", VERSION, len(head)) + head + body
    return blob + struct.pack("<I", zlib.crc32(blob))


def from_bytes(blob: bytes) -> Checkpoint:
    fixed = len(MAGIC) + 6
    if len(blob) < fixed + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not an AVTTS1 checkpoint (bad magic)")
    version, head_len = struct.unpack("<HI", blob[len(MAGIC):fixed])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if len(blob) < fixed + head_len + 4:
        raise CheckpointError("checkpoint truncated inside header")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError("checkpoint checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(blob[fixed:fixed + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from None
    if header.get("stage") not in STAGES:
        raise CheckpointError(f"unknown stage tag {header.get('stage')!r}")
    offset = fixed + head_len
    end = len(blob) - 4
    tensors = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > end:
            raise CheckpointError(f"checkpoint truncated in tensor {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset) \
            .reshape(shape).astype(np.float32)
        offset += nbytes
    if offset != end:
        raise CheckpointError("trailing bytes after tensor payload")
    params = {n: a for n, a in tensors.items() if not n.startswith("adam.")}
    optimizer = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        optimizer = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"],
                              m={n[len("adam.m/"):]: a for n, a in tensors.items() if n.startswith("adam.m/")},
                              v={n[len("adam.v/"):]: a for n, a in tensors.items() if n.startswith("adam.v/")})
    return Checkpoint(model_config=header["model_config"], params=params, stage=header["stage"],
                      step=header["step"], stats=header["stats"], optimizer=optimizer,
                      train_config=header.get("train_config", {}))


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(blob)
