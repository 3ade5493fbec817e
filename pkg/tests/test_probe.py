import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avground.archive import ArchiveRecord
from avground.errors import DataFormatError, ShapeError
from avground.probe import (GapTable, ProbeConfig, ProbeReport, eval_frame_probe, invariance_gap,
                            invariance_gap_report, pca_project_2d, train_domain_probe, train_frame_probe)


def toy_records(rng, n_utts=6, T=30, C=4, P=3, split="tr", condition="A", shift=0.0):
    recs = []
    centres = np.eye(P, C) * 6
    for i in range(n_utts):
        labels = rng.integers(0, P, T)
        frames = centres[labels] + 0.3 * rng.standard_normal((T, C)) + shift
        recs.append(ArchiveRecord(f"{split}{i:05d}-{condition}", frames.astype(np.float32), labels, condition))
    return recs


def naive_fer(probe, records):
    wrong = total = 0
    for r in records:
        for t in range(r.num_frames):
            wrong += int(probe.predict(r.frames[t : t + 1])[0] != r.labels[t])
            total += 1
    return wrong / total


def test_separable_toy_is_learned():
    rng = np.random.default_rng(0)
    recs = toy_records(rng)
    probe = train_frame_probe(recs, ProbeConfig(epochs=20))
    fer = eval_frame_probe(probe, recs)
    assert fer == {"A": 0.0}


def test_zero_epochs_predicts_majority_class():
    rng = np.random.default_rng(1)
    recs = toy_records(rng)
    probe = train_frame_probe(recs, ProbeConfig(epochs=0))
    labels = np.concatenate([r.labels for r in recs])
    prior = np.bincount(labels) / len(labels)
    assert eval_frame_probe(probe, recs)["A"] == pytest.approx(1 - prior.max())


def test_hidden_layer_probe_and_reproducibility():
    rng = np.random.default_rng(2)
    recs = toy_records(rng)
    cfg = ProbeConfig(epochs=5, hidden=16, seed=4)
    a, b = train_frame_probe(recs, cfg), train_frame_probe(recs, cfg)
    for pa, pb in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(pa.data, pb.data)
    assert eval_frame_probe(a, recs)["A"] < 0.05


def test_eval_matches_naive_recount_per_condition():
    rng = np.random.default_rng(3)
    train = toy_records(rng)
    probe = train_frame_probe(train, ProbeConfig(epochs=2))
    test = toy_records(rng, split="te", condition="A") + toy_records(rng, split="te", condition="B", shift=2.5)
    fer = eval_frame_probe(probe, test)
    for c in "AB":
        assert fer[c] == pytest.approx(naive_fer(probe, [r for r in test if r.condition == c]))


def test_errors():
    rng = np.random.default_rng(4)
    recs = toy_records(rng)
    with pytest.raises(DataFormatError):
        train_frame_probe([ArchiveRecord("x", np.zeros((3, 4), np.float32))])
    probe = train_frame_probe(recs, ProbeConfig(epochs=1))
    with pytest.raises(ShapeError):
        eval_frame_probe(probe, toy_records(rng, C=5))
    with pytest.raises(ValueError):
        train_domain_probe(recs)


def test_gap_arithmetic():
    fer = {"A": 0.20, "B": 0.45, "C": 0.50, "D": 0.55}
    assert invariance_gap(fer) == pytest.approx(0.30)
    assert ProbeReport("x", fer).gap == pytest.approx(0.30)


@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
@settings(max_examples=50, deadline=None)
def test_gap_consistent_with_stored_fers(values):
    fer = dict(zip("ABCD", values))
    assert ProbeReport("x", fer).gap == pytest.approx((values[1] + values[2] + values[3]) / 3 - values[0])


def test_domain_probe_at_chance_for_identical_features():
    rng = np.random.default_rng(5)
    base = toy_records(rng, n_utts=8, split="te")
    recs = [ArchiveRecord(r.utt_id[:-1] + c, r.frames, r.labels, c) for r in base for c in "ABCD"]
    assert train_domain_probe(recs, ProbeConfig(epochs=3)) == pytest.approx(0.25, abs=0.05)


def test_domain_probe_detects_an_offset():
    rng = np.random.default_rng(6)
    a = toy_records(rng, n_utts=8, split="te", condition="A")
    c = [ArchiveRecord(r.utt_id[:-1] + "C", r.frames + 3.0, r.labels, "C") for r in a]
    assert train_domain_probe(a + c, ProbeConfig(epochs=5)) > 0.9


def feature_set(rng, shift):
    recs = toy_records(rng, split="tr")
    for c, s in zip("ABCD", (0.0, shift, shift, 2 * shift)):
        recs += toy_records(rng, n_utts=4, split="te", condition=c, shift=s)
    return recs


def test_gap_table_single_row_has_no_flags():
    table = invariance_gap_report([("fbank", feature_set(np.random.default_rng(7), 1.0))], ProbeConfig(epochs=3),
                                  domain_probe=False)
    assert len(table.reports) == 1
    assert table.best_in_domain is None and table.smallest_gap is None
    assert table.rows()[0]["flags"] == ""


def test_gap_table_sorted_flagged_and_job_independent():
    feats = [("zeta", feature_set(np.random.default_rng(8), 2.0)), ("alpha", feature_set(np.random.default_rng(9), 0.0))]
    cfg = ProbeConfig(epochs=3)
    t1 = invariance_gap_report(feats, cfg)
    t2 = invariance_gap_report(feats, cfg, jobs=2)
    assert [r.feature_name for r in t1.reports] == ["alpha", "zeta"]
    assert t1.to_csv() == t2.to_csv()
    assert t1.smallest_gap == "alpha"
    assert "smallest-gap" in t1.to_text()


def test_pca_recovers_planar_data():
    rng = np.random.default_rng(10)
    X = rng.standard_normal((50, 2)) * [3.0, 1.0]
    proj = pca_project_2d(X)
    d_in = np.linalg.norm(X[:, None] - X[None], axis=-1)
    d_out = np.linalg.norm(proj.coords[:, None] - proj.coords[None], axis=-1)
    np.testing.assert_allclose(d_in, d_out, atol=1e-9)


@given(st.integers(3, 40), st.integers(2, 8), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_pca_components_orthonormal_and_ordered(n, c, seed):
    X = np.random.default_rng(seed).standard_normal((n, c))
    proj = pca_project_2d(X)
    np.testing.assert_allclose(proj.components @ proj.components.T, np.eye(2), atol=1e-8)
    assert proj.explained_variance[0] >= proj.explained_variance[1]
    assert proj.coords.shape == (n, 2)


def test_pca_rejects_degenerate_input():
    with pytest.raises(ValueError):
        pca_project_2d(np.ones((10, 3)))
    with pytest.raises(ValueError):
        pca_project_2d(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        pca_project_2d(np.arange(10.0)[:, None])
