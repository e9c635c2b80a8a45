"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"CPCA" | u32 version | u32 n | n bytes UTF-8 JSON header
    | u32 tensor count | per tensor: u32 name length, name, u32 ndim,
      ndim x u64 dims, prod(dims) x f64 data

The header carries iteration, phase and the architecture digest.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointCorruptError, CheckpointDigestError, CheckpointVersionError

MAGIC = b"CPCA"
VERSION = 1


@dataclass
class Checkpoint:
    tensors: dict  # name -> float64 ndarray
    iteration: int = 0
    phase: str = ""
    config_digest: str = ""
    meta: dict = field(default_factory=dict)
    version: int = VERSION


def config_digest(arch) -> str:
    blob = json.dumps(arch.digest_fields(), sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def encode(ckpt: Checkpoint) -> bytes:
    header = json.dumps({"iteration": ckpt.iteration, "phase": ckpt.phase,
                         "config_digest": ckpt.config_digest, "meta": ckpt.meta},
                        sort_keys=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", ckpt.version, len(header)), header,
           struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError(
                f"truncated checkpoint: need {n} bytes at offset {self.pos}, file has {len(self.data)}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointCorruptError("bad magic bytes; not a CPCA checkpoint")
    version, hlen = r.unpack("<II")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {VERSION}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptError(f"bad tensor name: {exc}") from exc
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
    if r.pos != len(data):
        raise CheckpointCorruptError(f"{len(data) - r.pos} trailing bytes after last tensor")
    return Checkpoint(tensors, header["iteration"], header["phase"], header["config_digest"],
                      header.get("meta", {}), version)


def save_checkpoint(path, ckpt: Checkpoint):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointCorruptError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = decode(data)
    if expected_digest is not None and ckpt.config_digest != expected_digest:
        raise CheckpointDigestError(
            f"checkpoint {path} was written for a different architecture "
            f"(digest {ckpt.config_digest[:12]} != {expected_digest[:12]})")
    return ckpt


# --------------------------------------------------------------------------
# packing training state

def pack_state(net=None, bank=None, optimizer=None) -> dict:
    tensors = {}
    if net is not None:
        for n, t in net.state_dict().items():
            tensors[f"model.{n}"] = t.detach().to(torch.float64).numpy().copy()
    if bank is not None:
        tensors["bank.prototypes"] = bank.prototypes.numpy().copy()
        tensors["bank.valid"] = bank.valid.to(torch.float64).numpy()
        tensors["bank.schedule"] = np.array([bank.t, bank.T, bank.m0, bank.alpha], dtype=np.float64)
    if optimizer is not None:
        for n, b in optimizer.state_dict().items():
            tensors[f"opt.{n}"] = b.detach().to(torch.float64).numpy().copy()
    return tensors


def restore_model(net, tensors: dict):
    state = {n[len("model."):]: torch.from_numpy(v) for n, v in tensors.items()
             if n.startswith("model.")}
    ref = net.state_dict()
    if set(state) != set(ref):
        raise CheckpointCorruptError("checkpoint model tensors do not match the architecture")
    net.load_state_dict({n: state[n].to(ref[n].dtype).reshape(ref[n].shape) for n in ref})
    return net


def restore_bank(tensors: dict):
    from .proto_bank import PrototypeBank

    if "bank.prototypes" not in tensors:
        return None
    t, T, m0, alpha = tensors["bank.schedule"].tolist()
    return PrototypeBank(torch.from_numpy(tensors["bank.prototypes"].copy()),
                         torch.from_numpy(tensors["bank.valid"]).bool(), int(t), int(T), m0, alpha)


def restore_optimizer(optimizer, tensors: dict):
    state = {n[len("opt."):]: torch.from_numpy(v) for n, v in tensors.items() if n.startswith("opt.")}
    optimizer.load_state_dict(state)
    return optimizer
