"""Feature-based reasoning head: region logits from prototype similarities, max-region pick."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .encoder import encode
from .lfm import extract_features


def similarity_score(z, p, eps=1e-12):
    """ln((d + 1) / (d + eps)) for d the squared distance between ``z`` and ``p``."""
    d = float(np.sum((np.asarray(z, dtype=float) - np.asarray(p, dtype=float)) ** 2))
    return math.log1p(d) - math.log(d + eps)


def similarity_from_sqdist(d, eps):
    """Tensor version of :func:`similarity_score` acting on squared distances."""
    return tn.log(d + 1.0) - tn.log(d + eps)


def score_tables(z, prototypes, eps, pos=None, neg=None):
    """Squared distances and similarity scores of every region feature.

    ``z`` is (N, T, C1).  Returns dict with ``d_pos``/``g_pos`` (N, T, K_pos)
    and ``d_neg``/``g_neg`` (N, T, K_neg).  ``pos``/``neg`` override the
    prototype arrays (e.g. with trainable Tensors).
    """
    z = tn.as_tensor(z)
    pos = tn.as_tensor(prototypes.pos if pos is None else pos)
    neg = tn.as_tensor(prototypes.neg if neg is None else neg)
    n, t_count, c1 = z.shape
    zz = z.reshape(n, t_count, 1, c1)
    d_pos = tn.sqdist(zz, pos.reshape(1, 1, pos.shape[0], c1))
    d_neg = tn.sqdist(zz, neg.reshape((1,) + neg.shape))
    return {
        "d_pos": d_pos,
        "d_neg": d_neg,
        "g_pos": similarity_from_sqdist(d_pos, eps),
        "g_neg": similarity_from_sqdist(d_neg, eps),
    }


def logits_from_scores(g_pos, g_neg, w_pos, w_neg):
    """P_t = sum_j |w_pos[t,j]| g_pos[.,t,j] - sum_j |w_neg[t,j]| g_neg[.,t,j]."""
    w_pos, w_neg = tn.as_tensor(w_pos), tn.as_tensor(w_neg)
    return (g_pos * tn.tabs(w_pos)).sum(axis=-1) - (g_neg * tn.tabs(w_neg)).sum(axis=-1)


def region_logits(features, prototypes, weights, eps=1e-12):
    """Per-region disease logits as a plain array; ``features`` is (T, C1) or (N, T, C1)."""
    z = np.asarray(features, dtype=float)
    single = z.ndim == 2
    if single:
        z = z[None]
    s = score_tables(z, prototypes, eps)
    out = logits_from_scores(s["g_pos"], s["g_neg"], weights.pos, weights.neg).data
    return out[0] if single else out


def disease_probability(m):
    """e^m / (e^m + e^-m), i.e. a logistic of 2m, evaluated without overflow."""
    return tn.sigmoid(tn.scale(tn.as_tensor(m), 2.0))


def model_forward(images, model, params=None):
    """Full differentiable forward pass on a batch (N, H, W, C).

    ``params`` maps trainable names (see ``ModelState.trainables``) to
    Tensors; missing names fall back to the model's arrays.
    """
    params = params or {}
    enc = {k: params.get(k, v) for k, v in model.encoder_params.items()}
    f = encode(images, enc, model.encoder_config)
    z = extract_features(f, model.bank)
    s = score_tables(z, model.prototypes, model.eps,
                     pos=params.get("proto.pos"), neg=params.get("proto.neg"))
    logits = logits_from_scores(s["g_pos"], s["g_neg"],
                                params.get("head.pos", model.weights.pos),
                                params.get("head.neg", model.weights.neg))
    top = tn.tmax(logits, axis=1)
    s.update(features=z, feature_maps=f, logits=logits, top=top, prob=disease_probability(top))
    return s


@dataclass
class PredictionOutcome:
    region_logits: np.ndarray
    region: int
    g_pos: np.ndarray
    g_neg: np.ndarray
    prob_disease: float
    prob_normal: float
    label: int

    @property
    def label_name(self):
        return "disease" if self.label == 1 else "normal"

    def to_dict(self):
        return {
            "label": self.label_name,
            "prob_disease": self.prob_disease,
            "prob_normal": self.prob_normal,
            "region": self.region,
            "region_logits": self.region_logits.tolist(),
            "g_pos": self.g_pos.tolist(),
            "g_neg": self.g_neg.tolist(),
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def outcome_from_logits(logits, g_pos, g_neg, pooled=None):
    """Normalise one image's region logits; ``pooled`` replaces max_t P_t when given."""
    logits = np.asarray(logits, dtype=float)
    region = int(np.argmax(logits))
    m = float(logits[region]) if pooled is None else float(pooled)
    p1 = float(disease_probability(m).data)
    return PredictionOutcome(
        region_logits=logits,
        region=region,
        g_pos=np.asarray(g_pos),
        g_neg=np.asarray(g_neg),
        prob_disease=p1,
        prob_normal=1.0 - p1,
        label=int(m > 0),
    )


def _batched(images):
    x = np.asarray(images, dtype=float)
    return (x[None], True) if x.ndim == 3 else (x, False)


def predict(x, model):
    """Classify one image (H, W, C) or a batch; batches return a list."""
    x, single = _batched(x)
    out = model_forward(x, model)
    res = [outcome_from_logits(out["logits"].data[i], out["g_pos"].data[i], out["g_neg"].data[i])
           for i in range(len(x))]
    return res[0] if single else res


def mean_pooled_baseline_predict(x, model):
    """Prototype-style comparator: same scores, but the image logit is mean_t P_t."""
    x, single = _batched(x)
    out = model_forward(x, model)
    res = []
    for i in range(len(x)):
        lg = out["logits"].data[i]
        res.append(outcome_from_logits(lg, out["g_pos"].data[i], out["g_neg"].data[i], pooled=lg.mean()))
    return res[0] if single else res


def predict_labels(images, model, batch_size=50):
    labels = []
    for start in range(0, len(images), batch_size):
        out = model_forward(np.asarray(images[start:start + batch_size], dtype=float), model)
        labels.append((out["top"].data > 0).astype(int))
    return np.concatenate(labels) if labels else np.zeros(0, dtype=int)
