import csv
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feainf import tensor as tn
from feainf import training
from feainf.model import PrototypeSet
from feainf.training import (LOG_COLUMNS, TrainConfig, TrainingDiverged, balance_loss,
                             compute_features, project_prototypes, prototype_losses, run_training,
                             total_loss, write_history_csv)

from .helpers import TINY_ENCODER, tiny_model


def nested_loop_losses(z, labels, pos, neg):
    """Direct transcription of the four prototype terms with explicit loops."""
    def sq(a, b):
        return sum((a[k] - b[k]) ** 2 for k in range(len(a)))

    n, t_count, _ = z.shape
    pc, ns, nc, ps = [], [], [], []
    for i in range(n):
        if labels[i] == 1:
            best = min(sq(z[i, t], pos[j]) for t in range(t_count) for j in range(len(pos)))
            pc.append(best)
            worst = max(sq(z[i, t], neg[t, j]) for t in range(t_count) for j in range(neg.shape[1]))
            ps.append(-worst)
        else:
            per_region = [min(sq(z[i, t], neg[t, j]) for j in range(neg.shape[1]))
                          for t in range(t_count)]
            nc.append(max(per_region))
            ns.append(-min(sq(z[i, t], pos[j]) for t in range(t_count) for j in range(len(pos))))
    mean = lambda v: sum(v) / len(v) if v else 0.0
    return {"pos_clst": mean(pc), "neg_clst": mean(nc), "neg_sep": mean(ns), "pos_sep": mean(ps)}


def random_instance(rng):
    n = int(rng.integers(1, 6))
    t_count = int(rng.integers(1, 5))
    c = int(rng.integers(1, 4))
    kp, kn = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    z = rng.normal(size=(n, t_count, c))
    labels = rng.integers(0, 2, size=n)
    protos = PrototypeSet(rng.normal(size=(kp, c)), rng.normal(size=(t_count, kn, c)))
    return z, labels, protos


def test_prototype_losses_match_nested_loops():
    rng = np.random.default_rng(0)
    for _ in range(100):
        z, labels, protos = random_instance(rng)
        got = prototype_losses(z, labels, protos)
        want = nested_loop_losses(z, labels, protos.pos, protos.neg)
        for k in want:
            assert abs(got[k] - want[k]) <= 1e-12, k


def test_prototype_loss_hand_cases():
    pos = np.array([[1.0, 2.0]])
    neg = np.array([[[0.0, 0.0]], [[0.0, 0.0]]])
    z = np.array([[[1.0, 2.0], [5.0, 5.0]]])
    assert prototype_losses(z, [1], PrototypeSet(pos, neg))["pos_clst"] == 0.0
    z = np.array([[[1.0, 0.0], [0.0, 2.0]]])  # distances 1 and 4 to the region prototypes
    assert prototype_losses(z, [0], PrototypeSet(pos, neg))["neg_clst"] == 4.0


def test_signs_and_empty_class():
    rng = np.random.default_rng(1)
    z, _, protos = random_instance(rng)
    only_pos = prototype_losses(z, np.ones(len(z), int), protos)
    assert only_pos["neg_clst"] == 0.0 and only_pos["neg_sep"] == 0.0
    assert only_pos["pos_clst"] >= 0 and only_pos["pos_sep"] <= 0


def test_separation_cap_clips_distance():
    protos = PrototypeSet(np.zeros((1, 1)), np.zeros((1, 1, 1)))
    z = np.array([[[5.0]], [[5.0]]])
    capped = prototype_losses(z, [1, 0], protos, separation_cap=10.0)
    raw = prototype_losses(z, [1, 0], protos)
    assert raw["pos_sep"] == -25.0 and capped["pos_sep"] == -10.0
    assert raw["neg_sep"] == -25.0 and capped["neg_sep"] == -10.0
    assert capped["pos_clst"] == raw["pos_clst"]


def test_balance_loss_values():
    assert float(balance_loss(0.5, 1, 2.0).data) == pytest.approx(0.25 * np.log(2), abs=1e-6)
    assert float(balance_loss(1.0, 1, 2.0).data) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=100)
@given(st.floats(1e-6, 1 - 1e-6))
def test_balance_loss_symmetry_and_cross_entropy(p):
    a = float(balance_loss(p, 1, 2.0).data)
    b = float(balance_loss(1 - p, 0, 2.0).data)
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-9, abs=1e-15)
    ce = float(balance_loss(p, 1, 0.0).data)
    assert ce == pytest.approx(-np.log(p), rel=1e-9)
    assert float(balance_loss(p, 0, 0.0).data) == pytest.approx(-np.log1p(-p), rel=1e-9, abs=1e-15)


PINNED_BREAKDOWN = [0.593793432783665, 0.6734327695416433, 1.7664442779803666,
                    -0.6647877724764274, -3.1864167006624493, 0.5923821053580481]


def _batch(seed=0, n=3):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(n, 16, 16, 1)), np.array([1, 0, 1][:n])


def test_total_is_weighted_sum():
    model = tiny_model(seed=3)
    x, y = _batch()
    cfg = TrainConfig(eta1=0.1, eta2=0.2, eta3=0.3, eta4=0.4)
    b, total = total_loss(x, y, model, cfg)
    expect = b.balance + 0.1 * b.neg_clst + 0.2 * b.neg_sep + 0.3 * b.pos_clst + 0.4 * b.pos_sep
    assert b.total == pytest.approx(expect, abs=1e-12)
    zero = TrainConfig(eta1=0, eta2=0, eta3=0, eta4=0)
    b0, _ = total_loss(x, y, model, zero)
    assert b0.total == b0.balance


def test_pinned_loss_breakdown():
    model = tiny_model(seed=3)
    x, y = _batch()
    b, _ = total_loss(x, y, model, TrainConfig())
    got = [b.balance, b.pos_clst, b.neg_clst, b.neg_sep, b.pos_sep, b.total]
    np.testing.assert_allclose(got, PINNED_BREAKDOWN, rtol=1e-10)


def test_total_loss_gradient_finite_difference():
    model = tiny_model(seed=4)
    x, y = _batch(seed=2)
    cfg = TrainConfig()
    arrays = model.trainables()

    def loss(**p):
        return total_loss(x, y, model, cfg, p)[1]

    graph = tn.Graph(loss)
    graph.forward(**arrays)
    for name in ("conv0.w", "shape1.w", "proto.pos", "proto.neg", "head.pos", "head.neg"):
        assert tn.finite_diff_check(graph, name, h=1e-6, coords=6,
                                    rng=np.random.default_rng(1)) < 1e-3, name


def test_projection_snaps_to_features(tiny_data):
    train, _ = tiny_data
    model = tiny_model(seed=1)
    feats = compute_features(train.images, model)
    before = model.prototypes.copy()
    protos = project_prototypes(model, train.images, train.labels)
    labels = train.labels
    for j in range(protos.num_pos):
        img, region = protos.pos_source[j]
        assert labels[img] == 1
        assert np.array_equal(protos.pos[j], feats[img, region])
        d_before = ((feats[labels == 1] - before.pos[j]) ** 2).sum(-1).min()
        d_after = ((feats[labels == 1] - protos.pos[j]) ** 2).sum(-1).min()
        assert d_after <= d_before
    for t in range(protos.neg.shape[0]):
        for j in range(protos.num_neg):
            img, region = protos.neg_source[t, j]
            assert labels[img] == 0 and region == t
            assert np.array_equal(protos.neg[t, j], feats[img, t])


def test_projection_picks_nearest_and_keeps_exact_matches():
    model = tiny_model(seed=2, num_pos=1, num_neg=1)
    x, _ = _batch(seed=5, n=3)
    labels = np.array([1, 1, 1])
    feats = compute_features(x, model)
    model.prototypes.pos[0] = feats[2, 7]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        protos = project_prototypes(model, x, labels)
    assert any("normal" in str(w.message) for w in caught)
    assert np.array_equal(protos.pos[0], feats[2, 7])
    assert tuple(protos.pos_source[0]) == (2, 7)
    assert np.array_equal(protos.neg, model.prototypes.neg)


def test_epochs_zero_returns_initial_model():
    x, y = _batch(n=3)
    init = tiny_model(seed=0)
    cfg = TrainConfig(epochs=0, num_pos=3, num_neg=2, seed=0)
    model, history = run_training(x, y, cfg, encoder_config=TINY_ENCODER)
    assert history == []
    for k, v in init.trainables().items():
        assert np.array_equal(v, model.trainables()[k])


def test_training_is_deterministic_and_logs(tmp_path, tiny_data):
    train, test = tiny_data
    cfg = TrainConfig(epochs=3, batch_size=8, projection_start=2, projection_period=1,
                      num_pos=2, num_neg=1, seed=9)
    a, ha = run_training(train.images, train.labels, cfg, test.images, test.labels,
                         encoder_config=TINY_ENCODER)
    b, hb = run_training(train.images, train.labels, cfg, test.images, test.labels,
                         encoder_config=TINY_ENCODER)
    for k, v in a.trainables().items():
        assert v.tobytes() == b.trainables()[k].tobytes()
    assert ha == hb
    assert [r["epoch"] for r in ha] == [1, 2, 3]
    path = tmp_path / "log.csv"
    write_history_csv(path, ha)
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 3


def test_tiny_training_learns(tiny_trained):
    _, history = tiny_trained
    assert np.median([r["total"] for r in history[:5]]) > np.median([r["total"] for r in history[-5:]])
    assert history[-1]["train_acc"] >= 0.9


def test_divergence_reported(monkeypatch):
    x, y = _batch(n=3)

    def bad_loss(*args, **kwargs):
        b, t = real(*args, **kwargs)
        b.total = float("nan")
        return b, t

    real = training.total_loss
    monkeypatch.setattr(training, "total_loss", bad_loss)
    cfg = TrainConfig(epochs=2, num_pos=3, num_neg=2)
    with pytest.raises(TrainingDiverged) as info:
        run_training(x, y, cfg, encoder_config=TINY_ENCODER)
    assert info.value.epoch == 1


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lr_encoder=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    cfg = TrainConfig()
    assert cfg.lr_for("conv2.w") == 1e-4
    assert cfg.lr_for("shape0.b") == 3e-3
    assert cfg.lr_for("proto.neg") == 1e-4 and cfg.lr_for("head.pos") == 1e-4
