import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from feainf.inference import (disease_probability, mean_pooled_baseline_predict, model_forward,
                              outcome_from_logits, predict, predict_labels, region_logits,
                              similarity_score)
from feainf.model import ClassifierWeights, PrototypeSet

from .helpers import tiny_model


def logit_oracle(z, protos, weights, eps):
    t_count = z.shape[0]
    out = np.zeros(t_count)
    for t in range(t_count):
        for j in range(protos.pos.shape[0]):
            d = sum((z[t, k] - protos.pos[j, k]) ** 2 for k in range(z.shape[1]))
            out[t] += abs(weights.pos[t, j]) * np.log((d + 1) / (d + eps))
        for j in range(protos.neg.shape[1]):
            d = sum((z[t, k] - protos.neg[t, j, k]) ** 2 for k in range(z.shape[1]))
            out[t] -= abs(weights.neg[t, j]) * np.log((d + 1) / (d + eps))
    return out


def test_similarity_at_zero_distance():
    z = np.array([0.3, 0.4])
    assert similarity_score(z, z) == pytest.approx(np.log(1e12), rel=1e-12)


def test_similarity_values():
    g = similarity_score(np.array([1.0, 0.0]), np.array([0.0, 0.0]))
    assert g == pytest.approx(np.log(2.0 / (1.0 + 1e-12)), rel=1e-14)


@given(st.floats(0, 1e6), st.floats(0, 1e6))
def test_similarity_decreasing_in_distance(a, b):
    lo, hi = sorted((a, b))
    g_lo = similarity_score(np.array([np.sqrt(lo)]), np.zeros(1))
    g_hi = similarity_score(np.array([np.sqrt(hi)]), np.zeros(1))
    assert g_lo >= g_hi >= 0


def test_region_logits_match_oracle():
    rng = np.random.default_rng(3)
    protos = PrototypeSet(rng.normal(size=(3, 4)), rng.normal(size=(5, 2, 4)))
    weights = ClassifierWeights(rng.normal(size=(5, 3)), rng.normal(size=(5, 2)))
    z = rng.normal(size=(2, 5, 4))
    got = region_logits(z, protos, weights)
    for b in range(2):
        np.testing.assert_allclose(got[b], logit_oracle(z[b], protos, weights, 1e-12), rtol=1e-11)


@settings(max_examples=200)
@given(st.floats(-1e3, 1e3))
def test_probabilities_sum_to_one(m):
    p1 = float(disease_probability(np.array(m)).data)
    assert 0.0 <= p1 <= 1.0
    out = outcome_from_logits(np.array([m]), np.zeros((1, 1)), np.zeros((1, 1)))
    assert out.prob_disease + out.prob_normal == pytest.approx(1.0, abs=1e-12)


def test_probability_formula():
    m = 0.8
    assert float(disease_probability(np.array(m)).data) == pytest.approx(1 / (1 + np.exp(-2 * m)))
    assert float(disease_probability(np.array(0.0)).data) == 0.5


def test_outcome_region_and_label():
    out = outcome_from_logits(np.array([-1.0, 3.0, 0.0]), np.zeros((3, 1)), np.zeros((3, 1)))
    assert out.region == 1 and out.label == 1 and out.label_name == "disease"
    zero = outcome_from_logits(np.array([0.0, -2.0]), np.zeros((2, 1)), np.zeros((2, 1)))
    assert zero.label == 0 and zero.prob_disease == 0.5


def test_max_versus_mean_pooling():
    logits = np.array([2.0, -3.0, -3.0, -3.0])
    assert outcome_from_logits(logits, np.zeros((4, 1)), np.zeros((4, 1))).label == 1
    assert outcome_from_logits(logits, np.zeros((4, 1)), np.zeros((4, 1)), pooled=logits.mean()).label == 0


def test_predict_on_model():
    model = tiny_model(seed=1)
    rng = np.random.default_rng(0)
    xs = rng.uniform(size=(3, 16, 16, 1))
    batch = predict(xs, model)
    single = predict(xs[1], model)
    assert len(batch) == 3
    np.testing.assert_array_equal(batch[1].region_logits, single.region_logits)
    out = model_forward(xs, model)
    assert out["logits"].shape == (3, 16)
    np.testing.assert_array_equal(predict_labels(xs, model, batch_size=2),
                                  [o.label for o in batch])
    base = mean_pooled_baseline_predict(xs[0], model)
    assert base.prob_disease == pytest.approx(
        float(disease_probability(np.array(batch[0].region_logits.mean())).data))


def test_weight_sign_is_ignored():
    model = tiny_model(seed=2)
    x = np.random.default_rng(1).uniform(size=(16, 16, 1))
    a = predict(x, model).region_logits
    model.weights.pos *= -1.0
    model.weights.neg *= -1.0
    np.testing.assert_array_equal(predict(x, model).region_logits, a)


def test_outcome_json():
    out = outcome_from_logits(np.array([0.5, -1.0]), np.ones((2, 2)), np.ones((2, 1)))
    doc = json.loads(out.to_json())
    assert doc["label"] == "disease"
    assert doc["region"] == 0
    assert len(doc["region_logits"]) == 2
    assert doc["prob_disease"] + doc["prob_normal"] == pytest.approx(1.0)
