import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feainf.metrics import (GroundTruth, accuracy, binarize, bounding_box, confusion_metrics,
                            descending_cutoff, proportion)


def test_confusion_hand_cases():
    a = np.array([[1, 1], [0, 0]])
    assert confusion_metrics(a, a) == (1.0, 1.0, 1.0)
    assert confusion_metrics(a, 1 - a) == (0.0, 0.0, 0.0)
    pred = np.array([1, 1, 1, 0, 0])
    gt = np.array([1, 1, 0, 1, 0])  # TP=2, FP=1, FN=1
    dice, ppv, sens = confusion_metrics(pred, gt)
    assert (dice, ppv, sens) == (4 / 6, 2 / 3, 2 / 3)


def test_zero_denominators():
    z = np.zeros((3, 3))
    assert confusion_metrics(z, z) == (0.0, 0.0, 0.0)
    assert proportion(z, np.ones((3, 3))) == 0.0


def test_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_metrics(np.zeros((2, 2)), np.zeros((2, 3)))


def test_harmonic_identity_random():
    rng = np.random.default_rng(0)
    for _ in range(500):
        shape = tuple(rng.integers(2, 12, size=2))
        p = rng.uniform(size=shape) < rng.uniform()
        g = rng.uniform(size=shape) < rng.uniform()
        dice, ppv, sens = confusion_metrics(p, g)
        for v in (dice, ppv, sens):
            assert 0.0 <= v <= 1.0
        if ppv + sens > 0:
            assert abs(dice - 2 * ppv * sens / (ppv + sens)) <= 1e-12


def test_binarize_cases():
    assert binarize(np.full((4, 5), 0.3)).all()
    vals = np.arange(1, 101, dtype=float).reshape(10, 10)
    b = binarize(vals, 20)
    assert b.sum() == 20 and b[vals > 80].all()
    with pytest.raises(ValueError):
        descending_cutoff(vals, 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 20), st.integers(2, 20), st.integers(0, 10_000), st.booleans())
def test_binarize_count(h, w, seed, quantize):
    s = np.random.default_rng(seed).uniform(size=(h, w))
    if quantize:
        s = np.round(s * 4) / 4
    b = binarize(s, 20)
    cutoff = descending_cutoff(s, 20)
    ties = int(np.sum(s == cutoff))
    assert np.floor(0.2 * h * w) <= b.sum() <= 0.2 * h * w + ties


def test_proportion_cases():
    s = np.ones((8, 8))
    gt = GroundTruth(box=(0, 0, 3, 3), shape=(8, 8))
    assert proportion(s, gt) == 0.25
    s2 = np.zeros((8, 8))
    s2[1:3, 1:3] = 0.7
    assert proportion(s2, gt) == 1.0


def test_proportion_double_loop_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        h, w = rng.integers(3, 10, size=2)
        s = rng.uniform(size=(h, w))
        r0, r1 = sorted(rng.integers(0, h, size=2))
        c0, c1 = sorted(rng.integers(0, w, size=2))
        inside = total = 0.0
        for i in range(h):
            for j in range(w):
                total += s[i, j]
                if r0 <= i <= r1 and c0 <= j <= c1:
                    inside += s[i, j]
        got = proportion(s, GroundTruth(box=(r0, c0, r1, c1), shape=(h, w)))
        assert abs(got - inside / total) <= 1e-12


@given(st.floats(1e-3, 1e3))
def test_proportion_scale_invariant(c):
    s = np.random.default_rng(1).uniform(size=(6, 6))
    gt = GroundTruth(box=(1, 1, 3, 4), shape=(6, 6))
    assert proportion(s * c, gt) == pytest.approx(proportion(s, gt), rel=1e-12)


def test_ground_truth_kinds():
    m = np.zeros((5, 5), dtype=np.uint8)
    m[1:3, 2:4] = 1
    assert bounding_box(m) == (1, 2, 2, 3)
    gm = GroundTruth(mask=m)
    gb = GroundTruth(box=bounding_box(m), shape=m.shape)
    assert gm.kind == "foreground-mask" and gb.kind == "bounding-box"
    assert np.array_equal(gm.region(), gb.region())
    with pytest.raises(ValueError):
        GroundTruth(box=(0, 0, 5, 1), shape=(5, 5))
    with pytest.raises(ValueError):
        GroundTruth(mask=np.full((2, 2), 2))
    with pytest.raises(ValueError):
        bounding_box(np.zeros((3, 3)))


def test_accuracy():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 1], [0, 0]) == 0.0
    assert accuracy([1, 0, 1, 1], [1, 0, 1, 0]) == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])
