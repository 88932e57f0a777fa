"""
Binary checkpoint format.

Layout (little-endian): b"L3DG", u32 version, u32 tensor count, tensors as
[u32 name length, UTF-8 name, u32 rank, u32 dims..., float32 data]; then the
optimizer block [u64 adam step, u32 count, "m/<name>" and "v/<name>" tensors];
then [u32 length, JSON] for the RNG state and [u32 length, JSON] for the
metadata {step, config_hash, config}. JSON is written with sorted keys.
"""

import io
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"L3DG"
VERSION = 1


class CheckpointFormatError(ValueError):
    """File is not a readable checkpoint of a supported version."""


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    adam_step: int = 0
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: Dict[str, Any] = field(default_factory=dict)
    step: int = 0
    config_hash: str = ""
    config: Dict[str, Any] = field(default_factory=dict)


def _pack_tensor(out: io.BytesIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    array = np.asarray(array, dtype="<f4")
    out.write(struct.pack("<I", len(encoded)))
    out.write(encoded)
    out.write(struct.pack("<I", array.ndim))
    if array.ndim:
        out.write(struct.pack(f"<{array.ndim}I", *array.shape))
    out.write(np.ascontiguousarray(array).tobytes())


def _pack_json(out: io.BytesIO, payload: Dict[str, Any]) -> None:
    encoded = json.dumps(payload, sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(encoded)))
    out.write(encoded)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(ckpt.params)))
    for name, array in ckpt.params.items():
        _pack_tensor(out, name, array)
    out.write(struct.pack("<QI", ckpt.adam_step, len(ckpt.adam_m) + len(ckpt.adam_v)))
    for name, array in ckpt.adam_m.items():
        _pack_tensor(out, f"m/{name}", array)
    for name, array in ckpt.adam_v.items():
        _pack_tensor(out, f"v/{name}", array)
    _pack_json(out, ckpt.rng_state)
    _pack_json(out, {"step": ckpt.step, "config_hash": ckpt.config_hash, "config": ckpt.config})
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, count: int) -> bytes:
        if self.offset + count > len(self.data):
            raise CheckpointFormatError(f"Checkpoint truncated at byte {self.offset} (needed {count} more)")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> Tuple[str, np.ndarray]:
        (length,) = self.unpack("<I")
        try:
            name = self.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointFormatError(f"Tensor name at byte {self.offset} is not UTF-8")
        (rank,) = self.unpack("<I")
        shape = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        array = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        return name, array

    def json(self) -> Dict[str, Any]:
        (length,) = self.unpack("<I")
        try:
            return json.loads(self.take(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointFormatError(f"Corrupt JSON block: {e}")


def decode_checkpoint(data: bytes) -> Checkpoint:
    reader = _Reader(data)
    if reader.take(4) != MAGIC:
        raise CheckpointFormatError("Not a checkpoint file (bad magic)")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise CheckpointFormatError(f"Unsupported checkpoint version {version} (expected {VERSION})")
    params = dict(reader.tensor() for _ in range(count))
    adam_step, moment_count = reader.unpack("<QI")
    adam_m: Dict[str, np.ndarray] = {}
    adam_v: Dict[str, np.ndarray] = {}
    for _ in range(moment_count):
        name, array = reader.tensor()
        kind, _, param = name.partition("/")
        if kind == "m":
            adam_m[param] = array
        elif kind == "v":
            adam_v[param] = array
        else:
            raise CheckpointFormatError(f"Unexpected optimizer tensor {name!r}")
    rng_state = reader.json()
    meta = reader.json()
    if reader.offset != len(data):
        raise CheckpointFormatError(f"{len(data) - reader.offset} trailing bytes after metadata")
    return Checkpoint(params=params, adam_step=adam_step, adam_m=adam_m, adam_v=adam_v, rng_state=rng_state,
                      step=int(meta.get("step", 0)), config_hash=meta.get("config_hash", ""),
                      config=meta.get("config", {}))


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    """Write atomically: a failed write leaves any previous file at `path` intact."""
    data = encode_checkpoint(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except OSError:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.info(f"[CHECKPOINT] Wrote step {ckpt.step} ({len(data)} bytes) to {path}")
    return path


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    return decode_checkpoint(data)


def tensor_names(ckpt: Checkpoint) -> List[str]:
    return list(ckpt.params)
