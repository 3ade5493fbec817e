"""Layer-wise feature distillation: tap a frozen audio branch, restore the
input frame rate by repetition, and store the result as GDFA archives."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .archive import ArchiveHeader, ArchiveRecord, read_archive, write_archive
from .autodiff import Tensor, no_grad
from .checkpoint import checkpoint_hash, load_checkpoint
from .errors import ConfigError, ShapeError
from .models import GroundingModel, audio_forward_with_taps


@dataclass
class DistillConfig:
    checkpoint: str
    layers: tuple[str, ...] = ("L1", "L2", "L3", "L4")
    batch_size: int = 1
    bn_mode: str = "infer"

    def validate(self, model: GroundingModel) -> None:
        unknown = [name for name in self.layers if name not in model.tap_names]
        if unknown:
            raise ConfigError("layers", f"{unknown} not among {model.tap_names}")
        if self.bn_mode != "infer":
            raise ConfigError("bn_mode", "distillation runs BatchNorm on frozen running statistics only")


def _tap_index(model: GroundingModel, layer) -> int:
    names = model.tap_names
    if isinstance(layer, (int, np.integer)):
        if not 1 <= layer <= len(names):
            raise ValueError(f"layer {layer} outside 1..{len(names)}")
        return int(layer) - 1
    if layer not in names:
        raise ValueError(f"unknown layer {layer!r}; model has {names}")
    return names.index(layer)


def all_taps(model: GroundingModel, features: np.ndarray) -> list[np.ndarray]:
    """Every tap for one (F, T) utterance, inference mode, each (C_k, T_k)."""
    with no_grad():
        _, taps = audio_forward_with_taps(model, Tensor(features, dtype=model.dtype), "infer")
    return [t.data for _, t in taps]


def extract_layer_features(model: GroundingModel, features: np.ndarray, layer) -> np.ndarray:
    """Tap ``layer`` (``"L2"`` or 2) for an (F, T) utterance -> (C_k, ceil(T / 2^k))."""
    return all_taps(model, features)[_tap_index(model, layer)]


def repeat_upsample(tap: np.ndarray, r: int, T: int) -> np.ndarray:
    """Repeat each of the ``T_k`` frames ``r`` times and truncate to ``T``."""
    tap = np.asarray(tap)
    if r < 1:
        raise ValueError(f"ratio must be >= 1, got {r}")
    if tap.ndim != 2 or tap.shape[1] != math.ceil(T / r):
        raise ShapeError(f"tap has {tap.shape[-1]} frames, expected ceil({T}/{r}) = {math.ceil(T / r)}")
    return tap[:, np.arange(T) // r]


def distill_records(
    model: GroundingModel,
    records: Sequence[ArchiveRecord],
    layers: Sequence[str],
    jobs: int = 1,
) -> dict[str, list[ArchiveRecord]]:
    """Distilled (T, C_k) records per layer, labels and conditions carried over."""
    idx = [_tap_index(model, name) for name in layers]
    ratios = model.audio.tap_ratios

    def one(rec: ArchiveRecord):
        taps = all_taps(model, np.ascontiguousarray(rec.frames.T))
        T = rec.num_frames
        return [repeat_upsample(taps[i], ratios[i], T).T.astype(np.float32) for i in idx]

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outputs = list(pool.map(one, records))
    else:
        outputs = [one(rec) for rec in records]
    return {
        name: [ArchiveRecord(rec.utt_id, out[n], rec.labels, rec.condition) for rec, out in zip(records, outputs)]
        for n, name in enumerate(layers)
    }


def archive_name(checkpoint_path, layer: str) -> str:
    return f"{Path(checkpoint_path).stem}-{layer}.gdfa"


def distill_checkpoint(checkpoint_path, source_archive, out_dir, layers: Sequence[str] = ("L1", "L2", "L3", "L4"),
                       jobs: int = 1) -> list[Path]:
    """Distil every record of ``source_archive`` through the checkpoint; one archive per layer."""
    model = load_checkpoint(checkpoint_path)
    cfg = DistillConfig(str(checkpoint_path), tuple(layers))
    cfg.validate(model)
    digest = checkpoint_hash(checkpoint_path)
    _, records = read_archive(source_archive)
    per_layer = distill_records(model, records, cfg.layers, jobs)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in cfg.layers:
        k = _tap_index(model, name)
        channels = per_layer[name][0].frames.shape[1] if per_layer[name] else _tap_channels(model, k)
        header = ArchiveHeader(f"{model.kind}-{name}", channels, model.audio.tap_ratios[k], digest)
        paths.append(write_archive(per_layer[name], header, out_dir / archive_name(checkpoint_path, name)))
    return paths


def _tap_channels(model: GroundingModel, k: int) -> int:
    cfg = model.audio.config
    if model.kind == "resdavenet":
        return cfg.stack_channels[k]
    pooled = [c for c, _, p in cfg.layers if p]
    return pooled[k]
