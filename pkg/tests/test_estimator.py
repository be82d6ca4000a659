import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import check_param_grads
from stagedefense import dataset as ds
from stagedefense.encoder import EMBED_DIM, GnnEncoder
from stagedefense.env import EpisodeConfig
from stagedefense.estimator import (LabeledEpisode, StageEstimator, backward_episodes, class_weights,
                                    forward_episodes, load_perception, predict, save_perception,
                                    train_estimator)
from stagedefense.evaluation import stage_f1
from stagedefense.nn import softmax, softmax_cross_entropy
from stagedefense.provenance import FEATURE_DIM


def random_episode(rng, T, labels=None):
    n_per = rng.integers(1, 6, T)
    n = int(n_per.sum())
    X = np.zeros((n, FEATURE_DIM))
    X[np.arange(n), rng.integers(0, 6, n)] = 1.0
    X[:, 6:] = rng.random((n, FEATURE_DIM - 6))
    window_ids = np.repeat(np.arange(T), n_per)
    src, dst = [], []
    off = 0
    for k in n_per:
        for _ in range(k):
            src.append(off + rng.integers(0, k))
            dst.append(off + rng.integers(0, k))
        off += k
    labels = rng.integers(0, 7, T) if labels is None else labels
    return LabeledEpisode(X, np.array(src), np.array(dst), window_ids, np.asarray(labels))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 30.0))
def test_belief_is_a_distribution(seed, scale):
    rng = np.random.default_rng(seed)
    est = StageEstimator(rng)
    for _ in range(5):
        p = est.infer(rng.standard_normal(EMBED_DIM) * scale)
        assert p.shape == (7,) and np.all(p >= 0) and abs(p.sum() - 1) < 1e-9


def test_zero_estimator_gives_uniform_belief():
    est = StageEstimator()
    for arr in est.named_parameters().values():
        arr[...] = 0.0
    np.testing.assert_allclose(est.infer(np.ones(EMBED_DIM)), np.full(7, 1 / 7), atol=1e-15)


def test_reset_makes_inference_repeatable():
    rng = np.random.default_rng(1)
    est = StageEstimator(rng)
    seq = rng.standard_normal((8, EMBED_DIM))
    first = [est.infer(g) for g in seq]
    est.reset()
    second = [est.infer(g) for g in seq]
    np.testing.assert_array_equal(first, second)


def test_streaming_matches_sequence_forward():
    rng = np.random.default_rng(2)
    est = StageEstimator(rng)
    seq = rng.standard_normal((6, EMBED_DIM))
    logits, _ = est.logits_sequence(seq[:, None, :])
    est.reset()
    streamed = np.array([est.infer(g) for g in seq])
    np.testing.assert_allclose(streamed, softmax(logits[:, 0]), atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_end_to_end_gradients(seed):
    rng = np.random.default_rng(seed)
    enc, est = GnnEncoder(rng), StageEstimator(rng)
    eps = [random_episode(rng, int(rng.integers(2, 6))) for _ in range(3)]
    labels = np.concatenate([e.labels for e in eps])
    w = rng.random(7) + 0.5

    def loss():
        logits, _ = forward_episodes(est, enc, eps)
        return softmax_cross_entropy(logits, labels, w[labels])[0]

    logits, tape = forward_episodes(est, enc, eps)
    _, dlogits = softmax_cross_entropy(logits, labels, w[labels])
    est_grads, enc_grads = backward_episodes(est, enc, tape, dlogits)
    assert check_param_grads(loss, est.named_parameters(), est_grads, rng) < 1e-5
    assert check_param_grads(loss, enc.named_parameters(), enc_grads, rng) < 1e-5


def test_memorizes_identical_pairs():
    rng = np.random.default_rng(3)
    template = random_episode(rng, 1, labels=[4])
    eps = [LabeledEpisode(template.features, template.src, template.dst, template.window_ids,
                          np.array([4])) for _ in range(4)]
    result = train_estimator(StageEstimator(rng), GnnEncoder(rng), eps, 200, rng, lr=1e-2)
    assert result.loss_curve[-1] < 1e-2


def test_shuffled_labels_give_chance_f1():
    rng = np.random.default_rng(4)
    train = [random_episode(rng, 50) for _ in range(40)]
    held = [random_episode(rng, 50) for _ in range(40)]
    enc, est = GnnEncoder(rng), StageEstimator(rng)
    train_estimator(est, enc, train, 5, rng)
    pred = np.concatenate(predict(est, enc, held))
    truth = np.concatenate([e.labels for e in held])
    assert abs(stage_f1(pred, truth).macro - 1 / 7) <= 0.05


@pytest.fixture(scope="module")
def small_dataset():
    return ds.to_labeled(ds.generate(EpisodeConfig(), 12, 11))


def test_block_averaged_loss_does_not_increase(small_dataset):
    rng = np.random.default_rng(5)
    result = train_estimator(StageEstimator(rng), GnnEncoder(rng), small_dataset, 30, rng, lr=5e-3)
    blocks = np.array(result.loss_curve).reshape(3, 10).mean(axis=1)
    assert np.all(np.diff(blocks) <= 0)


def test_training_is_deterministic(small_dataset):
    def run():
        rng = np.random.default_rng(6)
        enc, est = GnnEncoder(rng), StageEstimator(rng)
        res = train_estimator(est, enc, small_dataset[:3], 2, rng)
        return res.loss_curve, est.named_parameters()["head.W"].copy()

    (c1, w1), (c2, w2) = run(), run()
    assert c1 == c2
    np.testing.assert_array_equal(w1, w2)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_estimator(StageEstimator(), GnnEncoder(), [], 1, np.random.default_rng(0))


def test_class_weights_balance_present_classes():
    w = class_weights(np.array([0, 0, 0, 1, 3, 3]))
    assert w[0] == pytest.approx(6 / (3 * 3)) and w[1] == pytest.approx(2.0)
    assert w[2] == 0.0 and w[3] == pytest.approx(1.0)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    enc, est = GnnEncoder(rng), StageEstimator(rng)
    save_perception(tmp_path / "p.sdb", enc, est, {"note": 1})
    enc2, est2, meta = load_perception(tmp_path / "p.sdb")
    assert meta["note"] == 1
    ep = random_episode(rng, 4)
    np.testing.assert_array_equal(forward_episodes(est, enc, [ep])[0],
                                  forward_episodes(est2, enc2, [ep])[0])
