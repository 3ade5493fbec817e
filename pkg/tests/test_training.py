import numpy as np
import pytest

from avground.errors import ConfigError, TrainingError
from avground.frontend import LOG_FLOOR_VALUE
from avground.models import ImageEncoderConfig, ResDAVEnetAudioConfig, construct_model
from avground.synth import CorpusConfig, generate_corpus
from avground.training import (TrainingConfig, crop_or_pad, grounding_loss, make_optimizer, sample_negatives,
                               split_pairs, train_loop, train_step, triplet_margin_loss)

TINY = ResDAVEnetAudioConfig(stem_channels=8, stack_channels=(8, 16, 16, 32), kernel_length=3)


def tiny_model(seed=0):
    return construct_model("resdavenet", TINY, ImageEncoderConfig(output_dim=32), seed=seed)


@pytest.fixture(scope="module")
def small_corpus():
    return generate_corpus(CorpusConfig(n_pairs=64, n_probe_utterances=4, seed=3))


@pytest.mark.parametrize("s_ap,s_img,s_aud,expected", [
    (2.0, 0.5, 0.2, 0.0),
    (0.5, 0.4, -1.0, 0.9),
    (0.7, 0.7, 0.7, 2.0),
])
def test_triplet_loss_examples(s_ap, s_img, s_aud, expected):
    loss = triplet_margin_loss(np.array([s_ap]), np.array([s_img]), np.array([s_aud]), 1.0)
    assert loss.item() == pytest.approx(expected)


def test_triplet_loss_is_batch_mean_and_rejects_bad_margin():
    loss = triplet_margin_loss(np.array([2.0, 0.5]), np.array([0.5, 0.4]), np.array([0.2, -1.0]), 1.0)
    assert loss.item() == pytest.approx(0.45)
    with pytest.raises(ValueError):
        triplet_margin_loss(np.zeros(1), np.zeros(1), np.zeros(1), 0.0)


def test_semi_hard_definition_and_fallback():
    S = np.array([[0.8, 0.6, 0.9], [0.0, 1.0, 0.0], [5.0, 5.0, 0.1]])
    picks = sample_negatives(S, rho=1.0, seed=0)
    assert picks[0] == 1
    assert picks[1] == 0  # tie between 0 and 2 goes to the lowest index
    assert picks[2] != 2  # nothing below the positive: uniform fallback


def semi_hard_oracle(row, i):
    best, best_j = -np.inf, None
    for j, v in enumerate(row):
        if j != i and v < row[i] and v > best:
            best, best_j = v, j
    return best_j


@pytest.mark.parametrize("direction", ["audio_to_image", "image_to_audio"])
def test_semi_hard_matches_brute_force(direction):
    rng = np.random.default_rng(0)
    for trial in range(100):
        S = rng.standard_normal((8, 8))
        picks = sample_negatives(S, direction, rho=1.0, seed=trial)
        M = S if direction == "audio_to_image" else S.T
        for i in range(8):
            expect = semi_hard_oracle(M[i], i)
            if expect is None:
                assert picks[i] != i
            else:
                assert picks[i] == expect


class _Untouchable:
    shape = (6, 6)

    def __array__(self, *args, **kwargs):
        raise AssertionError("similarity matrix was read")


def test_uniform_sampling_never_reads_similarities():
    picks = sample_negatives(_Untouchable(), rho=0.0, seed=1)
    assert picks.shape == (6,) and np.all(picks != np.arange(6))


def test_uniform_sampling_covers_all_others():
    seen = np.zeros((4, 4), int)
    for seed in range(200):
        picks = sample_negatives(np.zeros((4, 4)), rho=0.0, seed=seed)
        seen[np.arange(4), picks] += 1
    assert np.all(np.diag(seen) == 0)
    assert np.all(seen + np.eye(4, dtype=int) * 999 > 20)


def test_row_shift_invariance():
    rng = np.random.default_rng(5)
    for trial in range(20):
        S = rng.standard_normal((8, 8))
        shifted = S + rng.standard_normal((8, 1)) * 10
        assert np.array_equal(sample_negatives(S, rho=0.7, seed=trial), sample_negatives(shifted, rho=0.7, seed=trial))


def test_sampler_rejects_small_batch():
    with pytest.raises(ValueError):
        sample_negatives(np.zeros((1, 1)))


def test_crop_or_pad():
    x = np.arange(20, dtype=np.float32).reshape(10, 2)
    padded = crop_or_pad(x, 13)
    assert padded.shape == (2, 13)
    assert np.all(padded[:, 10:] == np.float32(LOG_FLOOR_VALUE))
    centre = crop_or_pad(x, 4)
    np.testing.assert_array_equal(centre, x[3:7].T)
    rand = crop_or_pad(x, 4, np.random.default_rng(0))
    assert rand.shape == (2, 4)


def test_degenerate_batch_loss_is_twice_the_margin(small_corpus):
    short = min(small_corpus.pairs, key=lambda p: p.utterance.num_frames)
    model = tiny_model()
    cfg = TrainingConfig(crop_length=128)
    loss = grounding_loss(model, [short] * 4, cfg, np.random.default_rng(0))
    assert loss.item() == pytest.approx(2 * cfg.margin, abs=1e-5)


def test_train_step_reproducible(small_corpus):
    cfg = TrainingConfig(batch_size=8)
    batch = small_corpus.pairs[:8]
    out = []
    for _ in range(2):
        model = tiny_model(seed=2)
        opt = make_optimizer(model, cfg)
        losses = [train_step(model, batch, cfg, opt, np.random.default_rng(s)) for s in range(3)]
        out.append((losses, model.state()))
    assert out[0][0] == out[1][0]
    assert all(np.array_equal(out[0][1][k], out[1][1][k]) for k in out[0][1])


def test_non_finite_step_names_the_batch(small_corpus):
    model = tiny_model()
    model.image.proj_w.data[...] = np.nan
    cfg = TrainingConfig()
    with pytest.raises(TrainingError, match="p00000"):
        train_step(model, small_corpus.pairs[:4], cfg, make_optimizer(model, cfg), np.random.default_rng(0))


def test_loss_descends_over_fifty_steps(small_corpus):
    cfg = TrainingConfig(batch_size=16, lr=0.01, crop_length=64)
    model = tiny_model(seed=1)
    opt = make_optimizer(model, cfg)
    pairs = small_corpus.pairs
    losses = []
    for step in range(50):
        idx = np.random.default_rng(step).choice(len(pairs), 16, replace=False)
        losses.append(train_step(model, [pairs[i] for i in idx], cfg, opt, np.random.default_rng(1000 + step)))
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_train_loop_bookkeeping(small_corpus):
    train, held = split_pairs(small_corpus.pairs, 16)
    cfg = TrainingConfig(epochs=2, batch_size=16, crop_length=32, eval_pool=16)
    model = tiny_model()
    result = train_loop(model, train, held, cfg)
    # 48 training pairs in batches of 16: three steps per epoch
    assert [step for step, _, _ in result.curve] == list(range(1, 7))
    assert model.step == 3 * (result.best_epoch + 1)
    assert len(result.epoch_r10) == 2
    assert result.best_r10 == max(result.epoch_r10)
    assert result.curve_csv().startswith("step,loss,r10\n")


def test_zero_epochs_returns_initial_model(small_corpus):
    train, held = split_pairs(small_corpus.pairs, 16)
    model = tiny_model()
    before = model.state()
    result = train_loop(model, train, held, TrainingConfig(epochs=0))
    assert result.curve == [] and model.step == 0
    assert all(np.array_equal(before[k], v) for k, v in model.state().items())


@pytest.mark.parametrize("bad", [dict(margin=0), dict(semi_hard_fraction=1.5), dict(batch_size=1), dict(lr=0)])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainingConfig(**bad).validate()


def test_split_pairs_rejects_empty_sides():
    with pytest.raises(ValueError):
        split_pairs(list(range(5)), 5)
    with pytest.raises(ValueError):
        split_pairs(list(range(5)), 0)
