import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drivernet import tensor as T
from drivernet.config import ConfigError, TrainConfig, miniature
from drivernet.fusion import snapshot
from drivernet.layers import Parameter
from drivernet.synth import synthesize
from drivernet.tensor import Tensor
from drivernet.train import (
    Adam,
    TrainingDiverged,
    _batch,
    build_model,
    cross_validate,
    evaluate,
    fit,
    kfold_indices,
    load_model,
    metrics_from_predictions,
    metrics_table,
    predict,
    save_model,
    summarize_folds,
    train,
)

MINI = miniature(n_frames=16)
# d_model=4 is enough for gradient checks but its 4-unit ReLU fusion layer is
# often mostly dead at init, so the learnability example uses width 8
MINI_TRAIN = miniature(n_frames=16, d_model=8, encoder_channels=(4, 8), head_hidden=8)


@pytest.fixture(scope="module")
def tiny():
    return synthesize(40, seed=3, frame_size=8)


# --- losses and metrics -------------------------------------------------------


@pytest.mark.parametrize("label", [0, 1])
def test_cross_entropy_uniform_logits(label):
    assert T.cross_entropy(Tensor([[0.0, 0.0]]), [label]).item() == pytest.approx(math.log(2), abs=1e-15)


def test_metrics_hand_count():
    r = metrics_from_predictions([1, 1, 0, 0], [1, 0, 0, 0])
    assert (r.accuracy, r.precision, r.recall) == (0.75, 0.5, 1.0)
    assert (r.tp, r.fp, r.tn, r.fn) == (1, 1, 2, 0)
    perfect = metrics_from_predictions([1, 0, 1], [1, 0, 1])
    assert perfect.accuracy == perfect.precision == perfect.recall == 1.0


def test_undefined_precision_is_excluded_from_means():
    a = metrics_from_predictions([0, 0], [0, 1])
    assert a.precision is None
    b = metrics_from_predictions([1, 0], [1, 0])
    s = summarize_folds([a, b])
    assert s.mean["precision"] == 1.0
    assert s.mean["accuracy"] == 0.75
    assert s.std["accuracy"] == pytest.approx(0.25)  # population std
    assert s.accuracy == (s.tp + s.tn) / s.total


def test_metrics_table_layout():
    r = metrics_from_predictions([1, 0], [1, 1])
    r.latency_ms = {"median": 1.234}
    text = metrics_table([("gap/cf", 2_536_592, r)])
    head, row = text.splitlines()
    assert head.split() == ["model", "params", "A", "P", "R", "cost_ms"]
    assert row.split() == ["gap/cf", "2,536,592", "50.00", "100.00", "50.00", "1.23"]


# --- folds ---------------------------------------------------------------------


def test_five_folds_of_twenty():
    folds = kfold_indices(100, 5, seed=0)
    assert [len(f) for f in folds] == [20] * 5
    assert sorted(np.concatenate(folds).tolist()) == list(range(100))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(2, 10), st.integers(0, 99))
def test_fold_partition_properties(n, k, seed):
    if k > n:
        with pytest.raises(ValueError):
            kfold_indices(n, k, seed)
        return
    folds = kfold_indices(n, k, seed)
    sizes = [len(f) for f in folds]
    assert max(sizes) - min(sizes) <= 1
    allidx = np.concatenate(folds)
    assert len(allidx) == n and len(set(allidx.tolist())) == n
    assert [f.tolist() for f in kfold_indices(n, k, seed)] == [f.tolist() for f in folds]


def test_single_fold_rejected():
    with pytest.raises(ValueError):
        kfold_indices(10, 1, 0)


# --- optimiser ------------------------------------------------------------------


def test_adam_reduces_convex_quadratic():
    # every Adam step moves each coordinate by at most about lr, so any lr below
    # the smallest distance to the optimum must reduce 0.5 * sum(a * x^2)
    rng = np.random.default_rng(0)
    a = rng.uniform(0.5, 5.0, 6)
    x = Parameter(rng.uniform(1.0, 2.0, 6) * rng.choice([-1, 1], 6))
    opt = Adam([x], lr=0.5)
    losses = []
    for _ in range(20):
        opt.zero_grad()
        T.reset_tape()
        loss = T.sum(T.scale(x * x * a, 0.5))
        losses.append(loss.item())
        T.backward(loss)
        opt.step()
    assert all(b < a_ for a_, b in zip(losses, losses[1:4]))
    assert losses[-1] < losses[0]


def test_adam_skips_frozen_parameters():
    p, q = Parameter(np.ones(2)), Parameter(np.ones(3))
    q.freeze()
    opt = Adam([p, q])
    assert opt.params == [p]


# --- training -------------------------------------------------------------------


def test_fusion_step_leaves_blocks_bit_identical(tiny):
    model = build_model("drivernet", MINI)
    before = snapshot(model)
    norm = fit("feature", MINI, tiny, TrainConfig(epochs=1))[1]
    train(model, tiny.subset(range(8)), TrainConfig(epochs=1, batch_size=8), norm, regime="fusion")
    after = snapshot(model)
    for name in before:
        same = before[name].tobytes() == after[name].tobytes()
        assert same == (not name.startswith("fusion.")), name


def test_training_reaches_high_train_accuracy():
    data = synthesize(200, seed=8, frame_size=8)
    model, norm, hist = fit("drivernet", MINI_TRAIN, data, TrainConfig(epochs=30))
    assert hist["drivernet"].losses[-1] < hist["drivernet"].losses[0]
    assert evaluate(model, data, norm, latency_clips=0).accuracy >= 0.95


def test_pipeline_is_deterministic(tiny):
    def run():
        model, norm, _ = fit("drivernet", MINI, tiny, TrainConfig(epochs=2))
        return evaluate(model, tiny, norm, latency_clips=0), model

    (r1, m1), (r2, m2) = run(), run()
    assert r1.to_dict() == r2.to_dict()
    for (n, p), (_, q) in zip(m1.named_parameters(), m2.named_parameters()):
        assert p.data.tobytes() == q.data.tobytes(), n


def test_predict_requires_norm(tiny):
    with pytest.raises(ConfigError):
        predict(build_model("feature", MINI), tiny, None)


def test_divergence_is_reported(tiny):
    model = build_model("feature", MINI)
    norm = fit("feature", MINI, tiny, TrainConfig(epochs=1))[1]
    model.head.W.data[...] = 1e308
    with np.errstate(over="ignore"), pytest.raises(TrainingDiverged, match="epoch 0"):
        train(model, tiny, TrainConfig(epochs=1), norm)


def test_checkpoint_logits_are_bit_identical(tiny, tmp_path):
    model, norm, _ = fit("drivernet", MINI, tiny, TrainConfig(epochs=1))
    save_model(tmp_path / "m.ckpt", model, norm)
    loaded, norm2, header = load_model(tmp_path / "m.ckpt")
    model.eval()
    clips, streams, _ = _batch(tiny, np.arange(6), norm, True)
    clips2, streams2, _ = _batch(tiny, np.arange(6), norm2, True)
    with T.no_grad():
        assert model(clips, streams).data.tobytes() == loaded(clips2, streams2).data.tobytes()
    assert header["model_config"]["n_frames"] == 16


def test_parallel_folds_match_serial(tiny):
    cfg = TrainConfig(epochs=1)
    serial = cross_validate("feature", MINI, tiny, k=2, cfg=cfg, latency_clips=0)
    parallel = cross_validate("feature", MINI, tiny, k=2, cfg=cfg, jobs=2, latency_clips=0)
    strip = lambda r: [(f.accuracy, f.tp, f.fp, f.tn, f.fn) for f in r.folds]  # noqa: E731
    assert strip(serial) == strip(parallel)
    assert len(serial.folds) == 2
