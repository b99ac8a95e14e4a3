"""Binary checkpoints and the scalogram cache.

Checkpoint layout::

    b"TQCK" | uint32 LE header length | UTF-8 JSON header | payload

The header lists every array (name, shape) in payload order; the payload
is the arrays back to back as little-endian float32.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
MAGIC = b"TQCK"
MODEL_KINDS = ("vae", "classifier")
_F32 = np.dtype("<f4")


class CheckpointError(Exception):
    category = "checkpoint"


class VersionMismatchError(CheckpointError):
    def __init__(self, found, expected=FORMAT_VERSION):
        super().__init__(f"checkpoint format_version {found} does not match reader version {expected}")
        self.found, self.expected = found, expected


class TruncatedCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnknownModelKindError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_kind: str
    architecture: dict
    arrays: dict[str, np.ndarray]
    training_config: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def state_arrays(module: torch.nn.Module) -> dict[str, np.ndarray]:
    return {name: t.detach().cpu().numpy().astype(_F32, copy=True) for name, t in module.state_dict().items()}


def load_state_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray]):
    expected = module.state_dict()
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise CorruptCheckpointError(f"checkpoint/architecture mismatch: missing {missing}, unexpected {extra}")
    state = {}
    for name, ref in expected.items():
        arr = arrays[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CorruptCheckpointError(f"array {name!r} has shape {arr.shape}, model expects {tuple(ref.shape)}")
        state[name] = torch.from_numpy(np.array(arr, dtype=np.float32))
    module.load_state_dict(state)


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    if ckpt.model_kind not in MODEL_KINDS:
        raise UnknownModelKindError(f"unknown model_kind {ckpt.model_kind!r}")
    header = {
        "format_version": ckpt.format_version,
        "model_kind": ckpt.model_kind,
        "architecture": ckpt.architecture,
        "training_config": ckpt.training_config,
        "metrics": ckpt.metrics,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in ckpt.arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in ckpt.arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype=_F32).tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path, expected_kind: str | None = None) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC or len(data) < 8:
        raise CorruptCheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise TruncatedCheckpointError(f"{path}: header truncated")
    try:
        header = json.loads(data[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(header.get("format_version"))
    kind = header.get("model_kind")
    if kind not in MODEL_KINDS:
        raise UnknownModelKindError(f"{path}: unknown model_kind {kind!r}")
    if expected_kind is not None and kind != expected_kind:
        raise UnknownModelKindError(f"{path}: expected a {expected_kind} checkpoint, found {kind}")

    payload = memoryview(data)[8 + hlen:]
    sizes = [int(np.prod(a["shape"], dtype=np.int64)) for a in header["arrays"]]
    expected_bytes = 4 * sum(sizes)
    if len(payload) < expected_bytes:
        raise TruncatedCheckpointError(f"{path}: payload has {len(payload)} bytes, header declares {expected_bytes}")
    if len(payload) > expected_bytes:
        raise CorruptCheckpointError(f"{path}: {len(payload) - expected_bytes} trailing bytes after payload")
    arrays, offset = {}, 0
    for spec, n in zip(header["arrays"], sizes):
        arr = np.frombuffer(payload, dtype=_F32, count=n, offset=offset).reshape(spec["shape"])
        arrays[spec["name"]] = arr.copy()
        offset += 4 * n
    return Checkpoint(kind, header["architecture"], arrays, header.get("training_config", {}),
                      header.get("metrics", {}), header["format_version"])


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- scalogram cache -------------------------------------------------------------

def save_scalograms(stem: str | Path, images: np.ndarray, raw_min, raw_max, keys, labels, extra: dict | None = None):
    """Write ``stem.f32`` (little-endian float32 images) and ``stem.json`` (index)."""
    stem = Path(stem)
    images = np.ascontiguousarray(images, dtype=_F32)
    stem.with_suffix(".f32").write_bytes(images.tobytes())
    index = {
        "dtype": "<f4",
        "shape": list(images.shape),
        "keys": [[int(s), int(d)] for s, d in keys],
        "labels": list(labels),
        "raw_min": [float(x) for x in raw_min],
        "raw_max": [float(x) for x in raw_max],
    }
    index.update(extra or {})
    stem.with_suffix(".json").write_text(json.dumps(index))


def load_scalograms(stem: str | Path) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    index = json.loads(stem.with_suffix(".json").read_text())
    raw = stem.with_suffix(".f32").read_bytes()
    shape = index["shape"]
    if len(raw) != 4 * int(np.prod(shape)):
        raise TruncatedCheckpointError(f"{stem}.f32: size does not match index shape {shape}")
    return np.frombuffer(raw, dtype=_F32).reshape(shape).copy(), index
