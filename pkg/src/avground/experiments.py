"""End-to-end pipelines shared by the command line and the acceptance suite:
train a grounding model, distill its taps over the probe corpus, probe every
archive, and the nested data-scaling sweep."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .archive import ArchiveRecord
from .config import RunConfig
from .distill import distill_records
from .models import GroundingModel
from .probe import GapTable, ProbeConfig, invariance_gap_report
from .retrieval import RetrievalReport, evaluate_retrieval, rows_to_csv, rows_to_text
from .seeding import stream
from .synth import Corpus, _utterance_archive
from .training import TrainResult, split_pairs, train_loop

log = logging.getLogger(__name__)

RAW_FEATURE_NAME = "fbank"


def train_grounding(corpus: Corpus, cfg: RunConfig, train_indices: Sequence[int] | None = None,
                    on_epoch=None) -> TrainResult:
    """Fresh model from ``cfg.training.seed``; the last ``holdout`` pairs are held out."""
    train, heldout = split_pairs(corpus.pairs, cfg.training.holdout)
    if train_indices is not None:
        train = [train[i] for i in train_indices]
    model = cfg.model.build(cfg.training.seed, corpus.config.vocab_size, corpus.config.image_size)
    return train_loop(model, train, heldout, cfg.training, on_epoch)


def heldout_report(model: GroundingModel, corpus: Corpus, cfg: RunConfig) -> RetrievalReport:
    _, heldout = split_pairs(corpus.pairs, cfg.training.holdout)
    return evaluate_retrieval(model, heldout, (1, 5, 10), cfg.training.crop_length)


def probe_records(corpus: Corpus) -> list[ArchiveRecord]:
    recs, _ = _utterance_archive(corpus.probe, corpus.config.n_mels)
    return recs


def speaker_groups(corpus: Corpus) -> dict[str, str]:
    return {u.utt_id: str(corpus.language.speaker_group(u.speaker)) for u in corpus.probe}


def layer_probe_table(model: GroundingModel, corpus: Corpus, probe: ProbeConfig | None = None,
                      layers: Sequence[str] = ("L1", "L2", "L3", "L4"), include_raw: bool = True,
                      jobs: int = 1, with_groups: bool = True) -> GapTable:
    """Distill ``layers`` over the probe corpus and probe them next to raw FBank."""
    raw = probe_records(corpus)
    per_layer = distill_records(model, raw, layers, jobs)
    features = [(f"{model.kind}-{name}", recs) for name, recs in per_layer.items()]
    if include_raw:
        features.append((RAW_FEATURE_NAME, raw))
    groups = speaker_groups(corpus) if with_groups else None
    return invariance_gap_report(features, probe, corpus.config.n_phones, groups, jobs=jobs)


def invariance_trend(table: GapTable, model_kind: str = "resdavenet") -> dict[str, bool]:
    """The two orderings checked on every trained model."""
    by_name = {r.feature_name: r for r in table.reports}
    raw_gap = by_name[RAW_FEATURE_NAME].gap
    taps = sorted(n for n in by_name if n != RAW_FEATURE_NAME)
    mid = [f"{model_kind}-L2", f"{model_kind}-L3"]
    best_tap = min(taps, key=lambda n: (by_name[n].in_domain_fer, n))
    return {
        "mid_tap_gap_below_raw": any(by_name[n].gap < raw_gap for n in mid if n in by_name),
        "best_in_domain_tap_early": best_tap in (f"{model_kind}-L1", f"{model_kind}-L2"),
    }


# -- data scaling ----------------------------------------------------------------------


def check_fractions(fractions: Sequence[float]) -> None:
    fractions = list(fractions)
    if not fractions:
        raise ValueError("no fractions given")
    if any(not 0 < f <= 1 for f in fractions):
        raise ValueError(f"fractions must lie in (0, 1], got {fractions}")
    if any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError(f"fractions must be strictly ascending, got {fractions}")


def nested_subsets(n: int, fractions: Sequence[float], seed: int) -> list[np.ndarray]:
    """Index sets for each fraction, each a prefix of one seeded permutation so
    smaller sets are contained in larger ones; indices come back sorted."""
    check_fractions(fractions)
    perm = stream(seed, "scaling").permutation(n)
    return [np.sort(perm[: max(2, int(round(f * n)))]) for f in fractions]


@dataclass
class ScalingRow:
    fraction: float
    n_train: int
    r10: float
    gaps: dict[str, float] = field(default_factory=dict)
    fer_a: dict[str, float] = field(default_factory=dict)


@dataclass
class ScalingTable:
    rows: list[ScalingRow]

    def as_dicts(self) -> list[dict]:
        out = []
        for r in self.rows:
            d = {"fraction": r.fraction, "n_train": r.n_train, "R@10": r.r10}
            d.update({f"gap_{k}": v for k, v in sorted(r.gaps.items())})
            out.append(d)
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.as_dicts())

    def to_text(self) -> str:
        return rows_to_text(self.as_dicts())

    def r10_non_decreasing(self, tolerance: float = 0.02, max_inversions: int = 1) -> bool:
        drops = [a.r10 - b.r10 for a, b in zip(self.rows, self.rows[1:]) if b.r10 < a.r10]
        return len(drops) <= max_inversions and all(d <= tolerance for d in drops)

    def taps_with_non_increasing_gap(self) -> list[str]:
        names = sorted(self.rows[0].gaps)
        return [n for n in names
                if all(b.gaps[n] <= a.gaps[n] for a, b in zip(self.rows, self.rows[1:]))]


def _scaled_epochs(cfg: RunConfig, fraction: float) -> RunConfig:
    out = copy.deepcopy(cfg)
    out.training.epochs = int(round(cfg.training.epochs / fraction))
    return out


def scaling_experiment(corpus: Corpus, cfg: RunConfig, fractions: Sequence[float] = (0.25, 0.5, 1.0),
                       jobs: int = 1, trained: dict[float, GroundingModel] | None = None,
                       on_model=None) -> ScalingTable:
    """One model per nested training subset, each followed by distill + probe.

    Every fraction gets the same number of parameter updates (epochs scaled
    by ``1 / fraction``) so that only the amount of data varies; the best
    held-out checkpoint of each run is kept as usual.  ``trained`` may supply
    already-trained models for some fractions (same config and seed).
    """
    n_train = len(corpus.pairs) - cfg.training.holdout
    subsets = nested_subsets(n_train, fractions, cfg.training.seed)
    rows = []
    for frac, idx in zip(fractions, subsets):
        if trained and frac in trained:
            model = trained[frac]
        else:
            log.info("scaling: fraction %.2f (%d pairs)", frac, len(idx))
            model = train_grounding(corpus, _scaled_epochs(cfg, frac), idx).model
        if on_model is not None:
            on_model(frac, model)
        r10 = heldout_report(model, corpus, cfg).mean_recall(10)
        table = layer_probe_table(model, corpus, cfg.probe, cfg.distill.layers, include_raw=False, jobs=jobs,
                                  with_groups=False)
        rows.append(ScalingRow(frac, len(idx), r10, {r.feature_name: r.gap for r in table.reports},
                               {r.feature_name: r.in_domain_fer for r in table.reports}))
    return ScalingTable(rows)
