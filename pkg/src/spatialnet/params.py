"""Named parameter storage and the binary checkpoint container.

Checkpoint layout (all integers little-endian)::

    b"SPNTCKPT"            magic
    uint32                 format version (1)
    uint32                 header byte length N
    N bytes                UTF-8 JSON header
    float32[...]           tensor payloads, concatenated in header order

The header holds ``{"meta": {...}, "tensors": [{"name", "shape", "offset"}]}``
where ``offset`` counts float32 elements from the start of the payload. ``meta``
always carries ``config_hash``, ``seed`` and ``epoch``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from collections.abc import Iterator, Mapping
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"SPNTCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Ordered mapping ``path -> Tensor`` with a trainable/frozen tag per entry."""

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True, dtype=np.float32) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=dtype), requires_grad=trainable, name=name)
        self._tensors[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if self._trainable[n]]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, name: str, flag: bool) -> None:
        self._trainable[name] = flag
        self._tensors[name].requires_grad = flag

    def num_scalars(self, trainable_only: bool = False) -> int:
        return int(sum(t.size for n, t in self._tensors.items()
                       if self._trainable[n] or not trainable_only))

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Gradients of trainable entries; missing gradients are zeros."""
        return {n: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for n, t in self.trainable()}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._tensors) - set(state)
            extra = set(state) - set(self._tensors)
            if missing or extra:
                raise CheckpointError(f"parameter names differ: missing={sorted(missing)[:5]} "
                                      f"unexpected={sorted(extra)[:5]}")
        for name, value in state.items():
            if name not in self._tensors:
                continue
            t = self._tensors[name]
            value = np.asarray(value)
            if value.shape != t.shape:
                raise CheckpointError(f"{name}: shape {value.shape} != {t.shape}")
            # in place, so graph-free references held by model blocks see the update
            t.data[...] = value

    def astype(self, dtype) -> None:
        for t in self._tensors.values():
            t.data = t.data.astype(dtype)


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping) -> None:
    for key in ("config_hash", "seed", "epoch"):
        if key not in meta:
            raise CheckpointError(f"checkpoint meta lacks {key!r}")
    entries, offset = [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = json.dumps({"meta": dict(meta), "tensors": entries}, default=str).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for arr in tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(tensors, meta)`` from a checkpoint file."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    payload = np.frombuffer(raw, dtype="<f4", offset=16 + hlen)
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        chunk = payload[e["offset"]:e["offset"] + n]
        if chunk.size != n:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        tensors[e["name"]] = chunk.reshape(e["shape"]).astype(np.float32)
    return tensors, header["meta"]
