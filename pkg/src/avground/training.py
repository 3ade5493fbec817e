"""Triplet-loss grounding training with mixed uniform / semi-hard imposters."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import SGD, Tensor, no_grad
from .errors import ConfigError, NonFiniteGradientError, TrainingError
from .frontend import LOG_FLOOR_VALUE
from .models import GroundingModel, image_input
from .retrieval import recall_at_k, similarity_matrix
from .seeding import stream

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    margin: float = 1.0
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0
    epochs: int = 20
    semi_hard_fraction: float = 0.5
    crop_length: int = 128
    holdout: int = 200
    eval_pool: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.margin <= 0:
            raise ConfigError("margin", "must be > 0")
        if not 0 <= self.semi_hard_fraction <= 1:
            raise ConfigError("semi_hard_fraction", "must lie in [0, 1]")
        if self.batch_size < 2:
            raise ConfigError("batch_size", "must be >= 2")
        if self.lr <= 0:
            raise ConfigError("lr", "must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum", "must lie in [0, 1)")
        if self.epochs < 0 or self.crop_length < 1:
            raise ConfigError("epochs", "epochs must be >= 0 and crop_length >= 1")


def triplet_margin_loss(s_ap: Tensor, s_an_img: Tensor, s_an_aud: Tensor, margin: float) -> Tensor:
    """Batch mean of ``max(0, m - S_ap + S_an_img) + max(0, m - S_ap + S_an_aud)``."""
    if margin <= 0:
        raise ValueError(f"margin must be > 0, got {margin}")
    s_ap, s_an_img, s_an_aud = (ad.as_tensor(t) for t in (s_ap, s_an_img, s_an_aud))
    img_term = ad.relu(ad.shift(ad.sub(s_an_img, s_ap), margin))
    aud_term = ad.relu(ad.shift(ad.sub(s_an_aud, s_ap), margin))
    return ad.mean(ad.add(img_term, aud_term))


def sample_negatives(
    S,
    direction: str = "audio_to_image",
    rho: float = 0.5,
    seed: int | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One imposter index per anchor.

    With probability ``rho`` an anchor gets its semi-hard imposter: the
    highest-scoring candidate still strictly below the positive score (ties
    to the lowest index), falling back to uniform when no candidate is
    below.  Otherwise the imposter is uniform over the other items.  Every
    anchor consumes one coin and one uniform draw, so the random stream does
    not depend on ``S``; ``S`` itself is only read when some anchor needs
    the semi-hard rule.
    """
    B = S.shape[0]
    if B < 2:
        raise ValueError("need a batch of at least 2 for within-batch negatives")
    if direction not in ("audio_to_image", "image_to_audio"):
        raise ValueError(f"unknown direction {direction!r}")
    rng = rng if rng is not None else np.random.default_rng(seed)
    idx = np.arange(B)
    coins = rng.random(B)
    uniform = rng.integers(0, B - 1, size=B)
    uniform = uniform + (uniform >= idx)
    hard = coins < rho
    if not hard.any():
        return uniform
    M = np.asarray(S, dtype=np.float64)
    if direction == "image_to_audio":
        M = M.T
    pos = np.diag(M)[:, None]
    masked = np.where((M < pos) & (idx[None, :] != idx[:, None]), M, -np.inf)
    best = masked.argmax(axis=1)
    found = np.isfinite(masked.max(axis=1))
    return np.where(hard & found, best, uniform)


def crop_or_pad(features: np.ndarray, length: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """(T, F) features -> (F, length): random crop (centre if no rng) or end-pad with the log floor."""
    T = features.shape[0]
    if T >= length:
        start = int(rng.integers(0, T - length + 1)) if rng is not None else (T - length) // 2
        out = features[start : start + length]
    else:
        out = np.concatenate([features, np.full((length - T, features.shape[1]), LOG_FLOOR_VALUE, features.dtype)])
    return np.ascontiguousarray(out.T)


def audio_batch(pairs, length: int, rng=None, dtype=np.float32) -> np.ndarray:
    return np.stack([crop_or_pad(p.utterance.features, length, rng) for p in pairs]).astype(dtype)


def embed_pairs(model: GroundingModel, pairs, crop_length: int, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    audio, image = [], []
    with no_grad():
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start : start + batch_size]
            emb, _ = model.audio.forward_with_taps(Tensor(audio_batch(chunk, crop_length, None, model.dtype), dtype=model.dtype), "infer")
            audio.append(emb.data)
            image.append(model.image(Tensor(image_input(model, [p.image for p in chunk]), dtype=model.dtype)).data)
    return np.concatenate(audio), np.concatenate(image)


def grounding_loss(model: GroundingModel, pairs, config: TrainingConfig, rng: np.random.Generator) -> Tensor:
    x = Tensor(audio_batch(pairs, config.crop_length, rng, model.dtype), dtype=model.dtype)
    emb_a, _ = model.audio.forward_with_taps(x, "train")
    emb_v = model.image(Tensor(image_input(model, [p.image for p in pairs]), dtype=model.dtype))
    S = ad.matmul(emb_a, ad.transpose(emb_v))
    neg_img = sample_negatives(S.data, "audio_to_image", config.semi_hard_fraction, rng=rng)
    neg_aud = sample_negatives(S.data, "image_to_audio", config.semi_hard_fraction, rng=rng)
    idx = np.arange(len(pairs))
    return triplet_margin_loss(ad.take(S, idx, idx), ad.take(S, idx, neg_img), ad.take(S, neg_aud, idx), config.margin)


def train_step(model: GroundingModel, pairs, config: TrainingConfig, optimizer: SGD, rng: np.random.Generator) -> float:
    """Embed, sample imposters in both directions, backpropagate, update f and g."""
    if len(pairs) < 2:
        raise ValueError("train_step needs at least 2 pairs")
    loss = grounding_loss(model, pairs, config, rng)
    value = float(loss.data)
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss at step {model.step} on batch {[p.pair_id for p in pairs]}")
    optimizer.zero_grad()
    loss.backward()
    try:
        optimizer.step()
    except NonFiniteGradientError as exc:
        raise NonFiniteGradientError(f"{exc} at step {model.step} on batch {[p.pair_id for p in pairs]}") from None
    model.step += 1
    return value


def make_optimizer(model: GroundingModel, config: TrainingConfig) -> SGD:
    return SGD(model.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)


def heldout_recall(model: GroundingModel, pairs, config: TrainingConfig, k: int = 10) -> float:
    pool = pairs[: config.eval_pool]
    audio, image = embed_pairs(model, pool, config.crop_length)
    S = similarity_matrix(audio, image)
    k = min(k, len(pool))
    return 0.5 * (recall_at_k(S, k, "audio_to_image") + recall_at_k(S, k, "image_to_audio"))


@dataclass
class TrainResult:
    model: GroundingModel
    curve: list[tuple[int, float, float | None]] = field(default_factory=list)
    epoch_r10: list[float] = field(default_factory=list)
    best_r10: float | None = None
    best_epoch: int | None = None
    seconds: float = 0.0

    def curve_csv(self) -> str:
        lines = ["step,loss,r10"]
        for step, loss, r10 in self.curve:
            lines.append(f"{step},{loss!r},{'' if r10 is None else repr(r10)}")
        return "\n".join(lines) + "\n"


def split_pairs(pairs: Sequence, holdout: int) -> tuple[list, list]:
    """Last ``holdout`` pairs are held out; both parts must be non-empty."""
    if holdout < 1 or holdout >= len(pairs):
        raise ValueError(f"cannot hold out {holdout} of {len(pairs)} pairs")
    return list(pairs[:-holdout]), list(pairs[-holdout:])


def train_loop(
    model: GroundingModel,
    train_pairs: Sequence,
    heldout_pairs: Sequence,
    config: TrainingConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs; keep the parameters with the best held-out R@10."""
    config.validate()
    if not train_pairs or not heldout_pairs:
        raise ValueError("train and held-out splits must both be non-empty")
    if len(train_pairs) < 2:
        raise ValueError("need at least 2 training pairs")
    t0 = time.perf_counter()
    result = TrainResult(model)
    if config.epochs == 0:
        return result
    optimizer = make_optimizer(model, config)
    best_state = None
    for epoch in range(config.epochs):
        order = stream(config.seed, "shuffle", epoch).permutation(len(train_pairs))
        for start in range(0, len(order), config.batch_size):
            batch_idx = order[start : start + config.batch_size]
            if len(batch_idx) < 2:
                continue
            rng = stream(config.seed, "step", model.step)
            loss = train_step(model, [train_pairs[i] for i in batch_idx], config, optimizer, rng)
            result.curve.append((model.step, loss, None))
        r10 = heldout_recall(model, heldout_pairs, config)
        result.curve[-1] = (*result.curve[-1][:2], r10)
        result.epoch_r10.append(r10)
        log.info("epoch %d  step %d  loss %.4f  held-out R@10 %.4f", epoch + 1, model.step, result.curve[-1][1], r10)
        if on_epoch is not None:
            on_epoch(epoch, r10)
        if result.best_r10 is None or r10 > result.best_r10:
            result.best_r10, result.best_epoch = r10, epoch
            best_state = (copy.deepcopy(model.state()), model.step)
    state, step = best_state
    model.load_state(state)
    model.step = step
    result.seconds = time.perf_counter() - t0
    return result
