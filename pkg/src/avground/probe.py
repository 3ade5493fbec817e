"""Frame-level probes on distilled features.

A probe is a softmax classifier (optionally with one hidden ReLU layer)
trained on clean (condition A) frames of the probe training split.  Its frame
error rate on the test split per condition gives the in-domain error (A) and
the invariance gap ``mean(FER_B, FER_C, FER_D) - FER_A``.  A second probe
predicts the condition tag itself to measure how much nuisance information
leaks through a feature.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .archive import ArchiveRecord
from .autodiff import SGD, Tensor, no_grad
from .errors import DataFormatError, ShapeError
from .retrieval import rows_to_csv, rows_to_text
from .seeding import stream

OUT_OF_DOMAIN = ("B", "C", "D")


@dataclass
class ProbeConfig:
    epochs: int = 8
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 256
    hidden: int = 0
    weight_decay: float = 1e-4
    seed: int = 0


@dataclass
class ProbeModel:
    mean: np.ndarray
    scale: np.ndarray
    weight: Tensor
    bias: Tensor
    hidden_weight: Tensor | None = None
    hidden_bias: Tensor | None = None

    @property
    def input_dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_classes(self) -> int:
        return self.bias.shape[0]

    def parameters(self) -> list[Tensor]:
        ps = [self.weight, self.bias]
        if self.hidden_weight is not None:
            ps += [self.hidden_weight, self.hidden_bias]
        return ps

    def logits(self, frames: np.ndarray) -> Tensor:
        if frames.ndim != 2 or frames.shape[1] != self.input_dim:
            raise ShapeError(f"probe expects (N, {self.input_dim}) frames, got {frames.shape}")
        x = Tensor((frames - self.mean) / self.scale, dtype=np.float32)
        if self.hidden_weight is not None:
            x = ad.relu(ad.linear(x, self.hidden_weight, self.hidden_bias))
        return ad.linear(x, self.weight, self.bias)

    def predict(self, frames: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.logits(np.asarray(frames, dtype=np.float32)).data.argmax(axis=1)


def _stack(records: Sequence[ArchiveRecord], targets) -> tuple[np.ndarray, np.ndarray]:
    X = np.concatenate([r.frames for r in records]).astype(np.float32)
    y = np.concatenate([targets(r) for r in records]).astype(np.int64)
    return X, y


def _frame_labels(r: ArchiveRecord) -> np.ndarray:
    if r.labels is None:
        raise DataFormatError(f"record {r.utt_id!r} has no frame labels")
    return r.labels


def _fit(X: np.ndarray, y: np.ndarray, n_classes: int, config: ProbeConfig) -> ProbeModel:
    rng = stream(config.seed, "probe-init")
    mean = X.mean(axis=0)
    scale = np.maximum(X.std(axis=0), 1e-6)
    counts = np.bincount(y, minlength=n_classes)
    # zero weights + log-prior bias: an untrained probe predicts the majority class
    prior = np.log((counts + 1.0) / (counts.sum() + n_classes))
    d_in = X.shape[1]
    hw = hb = None
    if config.hidden:
        bound = math.sqrt(6.0 / d_in)
        hw = Tensor(rng.uniform(-bound, bound, (config.hidden, d_in)), requires_grad=True, dtype=np.float32)
        hb = Tensor(np.zeros(config.hidden), requires_grad=True, dtype=np.float32)
        d_in = config.hidden
    probe = ProbeModel(mean.astype(np.float32), scale.astype(np.float32),
                       Tensor(np.zeros((n_classes, d_in)), requires_grad=True, dtype=np.float32),
                       Tensor(prior, requires_grad=True, dtype=np.float32), hw, hb)
    if config.epochs == 0:
        return probe
    opt = SGD(probe.parameters(), lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
    for epoch in range(config.epochs):
        order = stream(config.seed, "probe-shuffle", epoch).permutation(len(y))
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            loss = ad.softmax_cross_entropy(probe.logits(X[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return probe


def train_frame_probe(records: Sequence[ArchiveRecord], config: ProbeConfig | None = None,
                      n_classes: int | None = None) -> ProbeModel:
    """Fit a phone classifier on every frame of ``records`` (callers pass the
    clean training split)."""
    config = config or ProbeConfig()
    if not records:
        raise ValueError("no records to train the probe on")
    X, y = _stack(records, _frame_labels)
    return _fit(X, y, n_classes or int(y.max()) + 1, config)


def frame_error_rate(probe: ProbeModel, records: Sequence[ArchiveRecord]) -> float:
    X, y = _stack(records, _frame_labels)
    return float(np.mean(probe.predict(X) != y))


def eval_frame_probe(probe: ProbeModel, records: Sequence[ArchiveRecord], group_by: str = "condition",
                     groups: dict[str, str] | None = None) -> dict[str, float]:
    """FER per group: by condition tag, or by ``groups[utt_id]`` when ``group_by='custom'``."""
    buckets: dict[str, list[ArchiveRecord]] = {}
    for r in records:
        if r.frames.shape[1] != probe.input_dim:
            raise ShapeError(f"record {r.utt_id!r} has {r.frames.shape[1]} channels, probe expects {probe.input_dim}")
        key = r.condition if group_by == "condition" else groups[r.utt_id]
        buckets.setdefault(key, []).append(r)
    return {k: frame_error_rate(probe, v) for k, v in sorted(buckets.items())}


def invariance_gap(fer: dict[str, float]) -> float:
    return float(np.mean([fer[c] for c in OUT_OF_DOMAIN]) - fer["A"])


def _base_id(utt_id: str) -> str:
    return utt_id.rsplit("-", 1)[0]


def train_domain_probe(records: Sequence[ArchiveRecord], config: ProbeConfig | None = None) -> float:
    """Held-out accuracy of a condition classifier; chance means no leakage.

    Utterances (all conditions of one parent together) alternate between the
    fitting and scoring halves so no parent is seen on both sides.
    """
    config = config or ProbeConfig()
    conditions = sorted({r.condition for r in records if r.condition is not None})
    if len(conditions) < 2:
        raise ValueError(f"domain probe needs at least two conditions, found {conditions}")
    bases = sorted({_base_id(r.utt_id) for r in records})
    fit_bases = set(bases[::2])
    fit = [r for r in records if _base_id(r.utt_id) in fit_bases]
    score = [r for r in records if _base_id(r.utt_id) not in fit_bases] or fit
    tag = {c: i for i, c in enumerate(conditions)}

    def targets(r):
        return np.full(r.num_frames, tag[r.condition])

    X, y = _stack(fit, targets)
    probe = _fit(X, y, len(conditions), config)
    Xs, ys = _stack(score, targets)
    return float(np.mean(probe.predict(Xs) == ys))


# -- comparative report ------------------------------------------------------------


@dataclass
class ProbeReport:
    feature_name: str
    fer: dict[str, float]
    domain_accuracy: float | None = None
    group_fer: dict[str, float] = field(default_factory=dict)

    @property
    def in_domain_fer(self) -> float:
        return self.fer["A"]

    @property
    def gap(self) -> float:
        return invariance_gap(self.fer)


def split_records(records: Sequence[ArchiveRecord], split: str, conditions: str = "ABCD") -> list[ArchiveRecord]:
    prefix = "tr" if split == "train" else "te"
    return [r for r in records if r.utt_id.startswith(prefix) and r.condition in conditions]


def probe_feature(name: str, records: Sequence[ArchiveRecord], config: ProbeConfig | None = None,
                  n_classes: int | None = None, speaker_groups: dict[str, str] | None = None,
                  domain_probe: bool = True) -> ProbeReport:
    """Train on clean training-split frames, score every test-split condition."""
    config = config or ProbeConfig()
    train = split_records(records, "train", "A")
    test = split_records(records, "test")
    if not train or not test:
        raise ValueError(f"{name}: need clean training records and test records (ids prefixed tr/te)")
    probe = train_frame_probe(train, config, n_classes)
    fer = eval_frame_probe(probe, test)
    missing = [c for c in "ABCD" if c not in fer]
    if missing:
        raise ValueError(f"{name}: test split lacks conditions {missing}")
    report = ProbeReport(name, fer)
    if domain_probe:
        report.domain_accuracy = train_domain_probe(test, config)
    if speaker_groups:
        report.group_fer = speaker_group_fer(records, speaker_groups, config, n_classes)
    return report


def speaker_group_fer(records, speaker_groups: dict[str, str], config: ProbeConfig,
                      n_classes: int | None = None) -> dict[str, float]:
    """Train on clean frames of the first speaker group, score clean test
    frames of every group (the gender-split analogue)."""
    clean = [r for r in records if r.condition == "A" and r.utt_id in speaker_groups]
    first = sorted(set(speaker_groups.values()))[0]
    train = [r for r in split_records(clean, "train") if speaker_groups[r.utt_id] == first]
    test = split_records(clean, "test")
    probe = train_frame_probe(train, config, n_classes)
    return eval_frame_probe(probe, test, group_by="custom", groups=speaker_groups)


@dataclass
class GapTable:
    reports: list[ProbeReport]

    @property
    def best_in_domain(self) -> str | None:
        if len(self.reports) < 2:
            return None
        return min(self.reports, key=lambda r: (r.in_domain_fer, r.feature_name)).feature_name

    @property
    def smallest_gap(self) -> str | None:
        if len(self.reports) < 2:
            return None
        return min(self.reports, key=lambda r: (r.gap, r.feature_name)).feature_name

    def rows(self) -> list[dict]:
        out = []
        for r in self.reports:
            row = {"feature": r.feature_name}
            row.update({f"FER_{c}": r.fer[c] for c in "ABCD"})
            row["gap"] = r.gap
            row["domain_acc"] = "" if r.domain_accuracy is None else r.domain_accuracy
            for g, v in sorted(r.group_fer.items()):
                row[f"FER_group{g}"] = v
            flags = []
            if r.feature_name == self.best_in_domain:
                flags.append("best-in-domain")
            if r.feature_name == self.smallest_gap:
                flags.append("smallest-gap")
            row["flags"] = " ".join(flags)
            out.append(row)
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows())

    def to_text(self) -> str:
        return rows_to_text(self.rows())


def invariance_gap_report(features: Sequence[tuple[str, Sequence[ArchiveRecord]]], config: ProbeConfig | None = None,
                          n_classes: int | None = None, speaker_groups: dict[str, str] | None = None,
                          domain_probe: bool = True, jobs: int = 1) -> GapTable:
    """One probe per feature type; rows ordered by feature name.

    Probes are independent, so ``jobs > 1`` trains them on a thread pool
    without changing any number.
    """
    if not features:
        raise ValueError("no feature archives given")

    def one(item):
        name, recs = item
        return probe_feature(name, recs, config, n_classes, speaker_groups, domain_probe)

    ordered = sorted(features, key=lambda f: f[0])
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            reports = list(pool.map(one, ordered))
    else:
        reports = [one(item) for item in ordered]
    return GapTable(reports)


# -- 2-D projection -------------------------------------------------------------------


@dataclass
class Projection:
    coords: np.ndarray  # (N, 2)
    components: np.ndarray  # (2, C), orthonormal rows
    explained_variance: np.ndarray  # (2,), descending


def pca_project_2d(frames: np.ndarray) -> Projection:
    """Project onto the top two principal components of the sample covariance."""
    X = np.asarray(frames, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] <= 2 or X.shape[1] < 2:
        raise ValueError(f"need more than 2 frames of at least 2 channels, got shape {X.shape}")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    if evals[order[0]] <= 1e-12 * max(1.0, np.abs(X).max()):
        raise ValueError("degenerate data: zero variance in every direction")
    comps = evecs[:, order].T
    # fix signs so the projection is reproducible
    signs = np.sign(comps[np.arange(comps.shape[0]), np.abs(comps).argmax(axis=1)])
    comps = comps * signs[:, None]
    return Projection(centered @ comps.T, comps, np.maximum(evals[order], 0.0))
