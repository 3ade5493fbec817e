"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (visible in the
``pytest -v`` log) before asserting.  The trained models are shared through
session-scoped caches: seed 0 doubles as the full-data point of the scaling
experiment.  Criteria 5 to 7 train mini models and take several minutes.
"""
from __future__ import annotations

import functools
import math
import time

import numpy as np
import pytest

from avground import autodiff as ad
from avground.archive import decode_archive, encode_archive, read_archive, write_archive
from avground.autodiff import Tensor, finite_diff_check, no_grad, relative_error, stable_difference
from avground.checkpoint import encode_checkpoint, load_checkpoint, save_checkpoint
from avground.config import RunConfig
from avground.distill import all_taps, distill_checkpoint, repeat_upsample
from avground.experiments import (heldout_report, invariance_trend, layer_probe_table, scaling_experiment,
                                  train_grounding)
from avground.models import PAPER_RESDAVENET, construct_model
from avground.retrieval import recall_at_k
from avground.synth import generate_corpus, save_corpus
from avground.training import TrainingConfig, sample_negatives, split_pairs, train_loop, triplet_margin_loss

SEEDS = (0, 1, 2)


def announce(capsys, n: int, name: str, passed: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\nACCEPTANCE {n} {'PASS' if passed else 'FAIL'} {name}: {detail}")


# -- shared experiment state ---------------------------------------------------------------


def run_config(seed: int) -> RunConfig:
    cfg = RunConfig()
    cfg.corpus.seed = cfg.training.seed = cfg.probe.seed = seed
    return cfg


@functools.lru_cache(maxsize=None)
def corpus_for(seed: int):
    return generate_corpus(run_config(seed).corpus)


@functools.lru_cache(maxsize=None)
def trained(seed: int):
    t0 = time.perf_counter()
    result = train_grounding(corpus_for(seed), run_config(seed))
    return result, time.perf_counter() - t0


@functools.lru_cache(maxsize=None)
def probe_table(seed: int):
    result, _ = trained(seed)
    return layer_probe_table(result.model, corpus_for(seed), run_config(seed).probe)


# -- 1. gradient correctness ----------------------------------------------------------------


def _op_cases(seed: int):
    """(name, inputs, function of inputs) with shapes varied by seed."""
    rng = np.random.default_rng(seed)
    n, m = 2 + seed % 3, 3 + seed % 2
    B, C, T = 1 + seed % 2, 2 + seed % 3, 6 + seed

    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    K = (1, 3, 5, 3, 1)[seed]
    stride = (1, 2, 1, 2, 3)[seed]
    pad = (0, 1, 2, 0, 1)[seed]
    labels = rng.integers(0, m, n)
    rows, cols = rng.integers(0, n, 7), rng.integers(0, m, 7)
    rmean, rvar = rng.standard_normal(C), rng.random(C) + 0.5
    return [
        ("add", [t(n, m), t(n, m)], lambda a, b: ad.add(a, b)),
        ("sub", [t(n, m), t(n, m)], lambda a, b: ad.sub(a, b)),
        ("mul", [t(n, m), t(n, m)], lambda a, b: ad.mul(a, b)),
        ("relu", [t(n, m)], ad.relu),
        ("scale", [t(n, m)], lambda a: ad.scale(a, -1.7)),
        ("shift", [t(n, m)], lambda a: ad.shift(a, 0.3)),
        ("sum", [t(n, m)], ad.total),
        ("mean", [t(n, m)], ad.mean),
        ("reshape", [t(n, m)], lambda a: ad.reshape(a, (m, n))),
        ("transpose", [t(n, m)], ad.transpose),
        ("take", [t(n, m)], lambda a: ad.take(a, rows, cols)),
        ("dot", [t(m), t(m)], ad.dot),
        ("matmul", [t(n, m), t(m, n + 1)], ad.matmul),
        ("linear", [t(n, m), t(4, m), t(4)], ad.linear),
        ("conv1d", [t(B, C, T), t(3, C, K), t(3)], lambda x, w, b: ad.conv1d(x, w, b, stride, pad)),
        ("conv2d", [t(B, 2, 7, 6), t(3, 2, 3, 3), t(3)], lambda x, w, b: ad.conv2d(x, w, b, stride % 2 + 1, 1)),
        ("maxpool1d", [t(B, C, T)], lambda x: ad.maxpool1d(x, 3, 2, 1)),
        ("batchnorm-train", [t(B + 1, C, T), t(C), t(C)],
         lambda x, g, b: ad.batchnorm1d(x, g, b, "train", np.zeros(C), np.ones(C))),
        ("batchnorm-infer", [t(B, C, T), t(C), t(C)],
         lambda x, g, b: ad.batchnorm1d(x, g, b, "infer", rmean, rvar)),
        ("temporal-mean-pool", [t(B, C, T)], ad.temporal_mean_pool),
        ("spatial-mean-pool", [t(B, C, 3, 4)], ad.spatial_mean_pool),
        ("softmax-cross-entropy", [t(n, m)], lambda z: ad.softmax_cross_entropy(z, labels)),
    ]


def op_gradient_errors() -> dict[str, float]:
    """Worst relative error per op; each output is projected on a fixed random direction."""
    worst: dict[str, float] = {}
    for seed in range(5):
        weights = np.random.default_rng(100 + seed)
        for name, inputs, fn in _op_cases(seed):
            with no_grad():
                w = Tensor(weights.standard_normal(fn(*inputs).shape))

            def loss(_, fn=fn, inputs=inputs, w=w):
                return ad.total(ad.mul(fn(*inputs), w))

            err = max(finite_diff_check(loss, x) for x in inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    return worst


def model_loss_error(seed: int, coords_per_tensor: int = 2) -> float:
    """Mini ResDAVEnet + image branch + triplet loss at float64, sampled coordinates."""
    model = construct_model("resdavenet", seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    B, T = 4, 24
    x = Tensor(rng.standard_normal((B, 40, T)))
    v = Tensor((rng.random((B, 40)) < 0.1).astype(np.float64))
    idx = np.arange(B)

    def similarity():
        emb_a, _ = model.audio.forward_with_taps(x, "train")
        return ad.matmul(emb_a, ad.transpose(model.image(v)))

    S = similarity()
    neg_img = sample_negatives(S.data, "audio_to_image", 0.5, seed=seed)
    neg_aud = sample_negatives(S.data, "image_to_audio", 0.5, seed=seed + 1)

    def loss():
        S = similarity()
        return triplet_margin_loss(ad.take(S, idx, idx), ad.take(S, idx, neg_img), ad.take(S, neg_aud, idx), 1.0)

    params = model.parameters()
    for p in params:
        p.zero_grad()
    loss().backward()
    worst = 0.0
    with no_grad():
        for p in params:
            flat = p.data.reshape(-1)
            for i in rng.choice(flat.size, min(coords_per_tensor, flat.size), replace=False):
                numeric = stable_difference(lambda: float(loss().data), flat, i)
                worst = max(worst, float(relative_error(p.grad.reshape(-1)[i], numeric)))
    return worst


def test_criterion_1_gradient_correctness(capsys):
    t0 = time.perf_counter()
    ops = op_gradient_errors()
    model = [model_loss_error(seed) for seed in range(5)]
    elapsed = time.perf_counter() - t0
    worst_op = max(ops, key=ops.get)
    passed = max(ops.values()) < 1e-4 and max(model) < 1e-4 and elapsed < 120
    announce(capsys, 1, "gradient correctness", passed,
             f"{len(ops)} ops x 5 seeds, worst {worst_op} {ops[worst_op]:.2e}; "
             f"mini model loss max {max(model):.2e} over 5 seeds; {elapsed:.0f} s")
    assert max(ops.values()) < 1e-4, ops
    assert max(model) < 1e-4, model
    assert elapsed < 120


# -- 2. architecture invariants --------------------------------------------------------------


def test_criterion_2_architecture_invariants(capsys):
    model = construct_model("resdavenet", seed=0)
    bad = []
    rng = np.random.default_rng(0)
    for T in range(1, 257):
        taps = all_taps(model, rng.standard_normal((40, T)).astype(np.float32))
        for k, (tap, r) in enumerate(zip(taps, model.audio.tap_ratios), start=1):
            up = repeat_upsample(tap, r, T)
            ok = (tap.shape[1] == math.ceil(T / 2 ** k) and up.shape[1] == T
                  and np.array_equal(up, tap[:, np.arange(T) // r]))
            if not ok:
                bad.append((T, k))
    full = construct_model("resdavenet", PAPER_RESDAVENET)
    full_taps = all_taps(full, rng.standard_normal((40, 50)).astype(np.float32))
    channels = [t.shape[0] for t in full_taps]
    ratio = full.audio.tap_ratios[-1]
    passed = not bad and channels == [128, 256, 512, 1024] and ratio == 16
    announce(capsys, 2, "architecture invariants", passed,
             f"T in [1,256]: {len(bad)} bad (T, tap) cases; full-size channels {channels}, overall ratio {ratio}")
    assert not bad
    assert channels == [128, 256, 512, 1024] and ratio == 2 ** 4


# -- 3. oracle equivalence --------------------------------------------------------------------


def _semi_hard_oracle(row, i):
    best, best_j = -np.inf, None
    for j in range(len(row)):
        if j != i and row[j] < row[i] and row[j] > best:
            best, best_j = row[j], j
    return best_j


def _recall_oracle(S, k):
    hits = 0
    for i in range(S.shape[0]):
        order = sorted(range(S.shape[1]), key=lambda j: (-S[i, j], j))
        hits += i in order[:k]
    return hits / S.shape[0]


def test_criterion_3_oracle_equivalence(capsys):
    rng = np.random.default_rng(3)
    sampler_mismatch = 0
    for trial in range(100):
        S = rng.standard_normal((8, 8))
        picks = sample_negatives(S, rho=1.0, seed=trial)
        for i in range(8):
            expect = _semi_hard_oracle(S[i], i)
            sampler_mismatch += (picks[i] == i) if expect is None else (picks[i] != expect)
    recall_mismatch = 0
    for trial in range(200):
        S = rng.integers(-2, 3, (20, 20)).astype(float) if trial % 2 else rng.standard_normal((20, 20))
        for k in (1, 5, 10):
            recall_mismatch += recall_at_k(S, k) != _recall_oracle(S, k)
            recall_mismatch += recall_at_k(S, k, "image_to_audio") != _recall_oracle(S.T, k)
    passed = sampler_mismatch == 0 and recall_mismatch == 0
    announce(capsys, 3, "oracle equivalence", passed,
             f"semi-hard mismatches {sampler_mismatch}/800 rows; Recall@K mismatches {recall_mismatch}/1200")
    assert sampler_mismatch == 0 and recall_mismatch == 0


# -- 4. random baseline -----------------------------------------------------------------------


def test_criterion_4_random_baseline(capsys):
    corpus = corpus_for(0)
    cfg = run_config(0)
    values = []
    for seed in range(10):
        model = construct_model("resdavenet", seed=seed)
        values.append(heldout_report(model, corpus, cfg).mean_recall(10))
    mean = float(np.mean(values))
    passed = abs(mean - 0.05) <= 0.03
    announce(capsys, 4, "random-baseline calibration", passed,
             f"untrained mean R@10 over 10 seeds, N=200: {mean:.4f} (target 0.05 +/- 0.03)")
    assert passed


# -- 5. end-to-end training ---------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_training_reaches_recall(capsys):
    result, seconds = trained(0)
    r10 = heldout_report(result.model, corpus_for(0), run_config(0)).mean_recall(10)
    passed = r10 >= 0.25 and seconds < 30 * 60
    announce(capsys, 5, "mini model reaches held-out R@10 >= 0.25", passed,
             f"R@10 {r10:.4f} (best epoch {result.best_epoch + 1}), trained in {seconds / 60:.1f} min")
    assert r10 >= 0.25
    assert seconds < 30 * 60


# -- 6. invariance trend --------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_invariance_trend(capsys):
    trends = {seed: invariance_trend(probe_table(seed)) for seed in SEEDS}
    gap_votes = sum(t["mid_tap_gap_below_raw"] for t in trends.values())
    early_votes = sum(t["best_in_domain_tap_early"] for t in trends.values())
    passed = gap_votes >= 2 and early_votes >= 2
    gaps = {seed: {r.feature_name.split("-")[-1]: round(r.gap, 3) for r in probe_table(seed).reports}
            for seed in SEEDS}
    announce(capsys, 6, "invariance trend", passed,
             f"L2/L3 gap below raw in {gap_votes}/3 seeds, best in-domain tap at L1/L2 in {early_votes}/3; gaps {gaps}")
    assert gap_votes >= 2
    assert early_votes >= 2


# -- 7. scaling trend ----------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_scaling_trend(capsys):
    cfg = run_config(0)
    table = scaling_experiment(corpus_for(0), cfg, (0.25, 0.5, 1.0), trained={1.0: trained(0)[0].model})
    r10 = [round(r.r10, 4) for r in table.rows]
    taps = table.taps_with_non_increasing_gap()
    passed = table.r10_non_decreasing(0.02, 1) and len(taps) >= 2
    announce(capsys, 7, "scaling trend", passed,
             f"R@10 {r10}; taps with non-increasing gap {taps}\n{table.to_text()}")
    assert table.r10_non_decreasing(0.02, 1)
    assert len(taps) >= 2


# -- 8. determinism and persistence -----------------------------------------------------------------


def _ten_step_checkpoint(corpus, path):
    cfg = TrainingConfig(epochs=1, seed=7)
    train, held = split_pairs(corpus.pairs, 200)
    model = construct_model("resdavenet", seed=7)
    train_loop(model, train[: 10 * cfg.batch_size], held[:32], cfg)
    assert model.step == 10
    return save_checkpoint(model, path)


def test_criterion_8_determinism_and_persistence(tmp_path, capsys):
    corpus = corpus_for(0)
    a = _ten_step_checkpoint(corpus, tmp_path / "a.gdck").read_bytes()
    b = _ten_step_checkpoint(corpus, tmp_path / "b.gdck").read_bytes()
    ckpt_identical = a == b

    model = load_checkpoint(tmp_path / "a.gdck")
    ckpt_round_trip = encode_checkpoint(model) == a

    paths = save_corpus(corpus, tmp_path / "corpus")
    probe_path = next(p for p in paths if p.name == "probe.gdfa")
    header, records = read_archive(probe_path)
    archive_round_trip = encode_archive(records, header) == probe_path.read_bytes()
    sub = write_archive(records[:200], header, tmp_path / "sub.gdfa")
    _, again = decode_archive(sub.read_bytes())
    values_exact = all(np.array_equal(x.frames, y.frames) and np.array_equal(x.labels, y.labels)
                       for x, y in zip(records[:200], again))

    first = distill_checkpoint(tmp_path / "a.gdck", sub, tmp_path / "d1")
    second = distill_checkpoint(tmp_path / "a.gdck", sub, tmp_path / "d2")
    distill_identical = all(p.read_bytes() == q.read_bytes() for p, q in zip(first, second))
    checks = dict(checkpoint_after_10_steps=ckpt_identical, checkpoint_round_trip=ckpt_round_trip,
                  archive_round_trip=archive_round_trip and values_exact, distillation_repeatable=distill_identical)
    passed = all(checks.values())
    announce(capsys, 8, "determinism and persistence", passed, ", ".join(f"{k}={v}" for k, v in checks.items()))
    assert passed, checks
