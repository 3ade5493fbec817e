"""GDCK checkpoint files.

Layout (little-endian)::

    b"GDCK" | version u16 | kind u8 | config (u32 length + UTF-8 JSON)
    | tensor-count u32 | tensors...

    tensor := name (u32 length + UTF-8) | rank u8 | dims u32 * rank
              | float32 payload (row-major)

The JSON config carries both branch configs, the training step counter and
the seed, serialised with sorted keys so that save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .archive import _Reader
from .errors import BadMagicError, KindMismatchError, VersionMismatchError
from .models import MODEL_KINDS, GroundingModel, config_from_dict, construct_model, image_config_from_dict

MAGIC = b"GDCK"
VERSION = 1


def encode_checkpoint(model: GroundingModel) -> bytes:
    meta = {**model.config_dict(), "seed": model.seed, "step": model.step}
    cfg = json.dumps(meta, sort_keys=True).encode("utf-8")
    state = model.state()
    parts = [MAGIC, struct.pack("<HB", VERSION, MODEL_KINDS.index(model.kind)),
             struct.pack("<I", len(cfg)), cfg, struct.pack("<I", len(state))]
    for name, arr in state.items():
        nb = name.encode("utf-8")
        parts += [struct.pack("<I", len(nb)), nb, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}I", *arr.shape), np.ascontiguousarray(arr, dtype="<f4").tobytes()]
    return b"".join(parts)


def save_checkpoint(model: GroundingModel, path) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(model))
    return path


def decode_checkpoint(buf: bytes, name: str = "<checkpoint>", expected_kind: str | None = None) -> GroundingModel:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{name}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf, name)
    r.take(4)
    version, kind_tag = r.unpack("<HB")
    if version != VERSION:
        raise VersionMismatchError(f"{name}: checkpoint version {version}, reader supports {VERSION}")
    if kind_tag >= len(MODEL_KINDS):
        raise KindMismatchError(f"{name}: unknown model kind tag {kind_tag}")
    kind = MODEL_KINDS[kind_tag]
    if expected_kind is not None and kind != expected_kind:
        raise KindMismatchError(f"{name}: checkpoint holds a {kind} model, expected {expected_kind}")
    meta = json.loads(r.string())
    model = construct_model(kind, config_from_dict(kind, meta["audio"]), image_config_from_dict(meta["image"]),
                            seed=meta["seed"])
    model.step = meta["step"]
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        tname = r.string()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        state[tname] = r.array("<f4", int(np.prod(dims))).reshape(dims)
    model.load_state(state)
    return model


def load_checkpoint(path, expected_kind: str | None = None) -> GroundingModel:
    path = Path(path)
    return decode_checkpoint(path.read_bytes(), str(path), expected_kind)


def checkpoint_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
