"""Training objective, optimisation loop and prototype projection."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as tn
from .inference import model_forward, predict_labels
from .lfm import extract_features
from .encoder import encode
from .metrics import accuracy
from .model import init_model

log = logging.getLogger(__name__)

P_CLAMP = 1e-7


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, detail):
        super().__init__(f"non-finite loss at epoch {epoch}: {detail}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    kappa: float = 2.0
    eta1: float = 1e-3  # normal clustering
    eta2: float = 1e-3  # normal separation
    eta3: float = 1e-3  # disease clustering
    eta4: float = 1e-3  # disease separation
    lr_encoder: float = 1e-4
    lr_shaping: float = 3e-3
    lr_prototypes: float = 1e-4
    lr_head: float = 1e-4
    batch_size: int = 20
    epochs: int = 30
    projection_start: int = 10
    projection_period: int = 10
    num_pos: int = 10
    num_neg: int = 4
    alpha: float = 0.1
    separation_cap: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        for name in ("lr_encoder", "lr_shaping", "lr_prototypes", "lr_head"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")

    def lr_for(self, name):
        if name.startswith("conv"):
            return self.lr_encoder
        if name.startswith("shape"):
            return self.lr_shaping
        if name.startswith("proto"):
            return self.lr_prototypes
        return self.lr_head

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class LossBreakdown:
    balance: float
    pos_clst: float
    neg_clst: float
    neg_sep: float
    pos_sep: float
    total: float

    def as_dict(self):
        return asdict(self)


# ----------------------------------------------------------------------
def balance_loss(prob, labels, kappa):
    """Per-image weighted balance loss; ``prob`` is P(y=1|x), clamped before the logs."""
    p = tn.clip(tn.as_tensor(prob), P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(labels, dtype=float)
    q = 1.0 - p
    return -(tn.power(q, kappa) * y * tn.log(p)) - (tn.power(p, kappa) * (1.0 - y) * tn.log(q))


def prototype_loss_terms(d_pos, d_neg, labels, separation_cap=None):
    """Four clustering/separation terms from (N, T, K) squared-distance tables.

    ``separation_cap`` clips the distances inside the two separation terms so
    they stop pushing once a feature is that far from the opposing prototypes.
    """
    labels = np.asarray(labels)
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    zero = tn.Tensor(0.0)
    out = {"pos_clst": zero, "neg_clst": zero, "neg_sep": zero, "pos_sep": zero}
    if len(pos_idx):
        dp = d_pos[pos_idx]
        dn = d_neg[pos_idx]
        out["pos_clst"] = dp.min(axis=2).min(axis=1).mean()
        out["pos_sep"] = -_capped(dn.max(axis=2).max(axis=1), separation_cap).mean()
    if len(neg_idx):
        dp = d_pos[neg_idx]
        dn = d_neg[neg_idx]
        out["neg_clst"] = dn.min(axis=2).max(axis=1).mean()
        out["neg_sep"] = -_capped(dp.min(axis=2).min(axis=1), separation_cap).mean()
    return out


def _capped(d, cap):
    return d if cap is None else tn.clip(d, -np.inf, cap)


def prototype_losses(features, labels, prototypes, separation_cap=None):
    """Float values of the four prototype terms for (N, T, C1) features."""
    z = np.asarray(features, dtype=float)
    d_pos = ((z[:, :, None, :] - prototypes.pos[None, None]) ** 2).sum(-1)
    d_neg = ((z[:, :, None, :] - prototypes.neg[None]) ** 2).sum(-1)
    terms = prototype_loss_terms(tn.Tensor(d_pos), tn.Tensor(d_neg), labels, separation_cap)
    return {k: float(v.data) for k, v in terms.items()}


def total_loss(images, labels, model, config, params=None):
    """Differentiable total objective; returns (LossBreakdown, scalar Tensor)."""
    out = model_forward(images, model, params)
    h = balance_loss(out["prob"], labels, config.kappa).mean()
    terms = prototype_loss_terms(out["d_pos"], out["d_neg"], labels, config.separation_cap)
    total = (h + terms["neg_clst"] * config.eta1 + terms["neg_sep"] * config.eta2
             + terms["pos_clst"] * config.eta3 + terms["pos_sep"] * config.eta4)
    breakdown = LossBreakdown(
        balance=float(h.data),
        pos_clst=float(terms["pos_clst"].data),
        neg_clst=float(terms["neg_clst"].data),
        neg_sep=float(terms["neg_sep"].data),
        pos_sep=float(terms["pos_sep"].data),
        total=float(total.data),
    )
    return breakdown, total


# ----------------------------------------------------------------------
def compute_features(images, model, batch_size=50):
    """Region features z_t for every image, as an (N, T, C1) array."""
    chunks = []
    for start in range(0, len(images), batch_size):
        f = encode(np.asarray(images[start:start + batch_size], dtype=float),
                   model.encoder_params, model.encoder_config)
        chunks.append(extract_features(f, model.bank).data)
    return np.concatenate(chunks)


def project_prototypes(model, images, labels, features=None):
    """Snap each prototype onto its nearest training feature; returns a new PrototypeSet.

    Disease prototypes search every region of every disease image; normal
    prototype (t, j) searches region t of every normal image.
    """
    labels = np.asarray(labels)
    z = compute_features(images, model) if features is None else features
    protos = model.prototypes.copy()
    pos_idx = np.flatnonzero(labels == 1)
    neg_idx = np.flatnonzero(labels == 0)
    if len(pos_idx) == 0:
        warnings.warn("no disease images: disease prototypes not projected", stacklevel=2)
    else:
        zp = z[pos_idx]  # (Np, T, C)
        cand = zp.reshape(-1, zp.shape[-1])
        for j in range(protos.num_pos):
            d = ((cand - protos.pos[j]) ** 2).sum(-1)
            k = int(np.argmin(d))
            img, region = divmod(k, zp.shape[1])
            protos.pos[j] = cand[k]
            protos.pos_source[j] = (pos_idx[img], region)
    if len(neg_idx) == 0:
        warnings.warn("no normal images: normal prototypes not projected", stacklevel=2)
    else:
        zn = z[neg_idx]
        for t in range(protos.neg.shape[0]):
            cand = zn[:, t, :]
            for j in range(protos.num_neg):
                d = ((cand - protos.neg[t, j]) ** 2).sum(-1)
                k = int(np.argmin(d))
                protos.neg[t, j] = cand[k]
                protos.neg_source[t, j] = (neg_idx[k], t)
    return protos


# ----------------------------------------------------------------------
def run_training(train_images, train_labels, config=None, test_images=None, test_labels=None,
                 model=None, encoder_config=None, callback=None):
    """Adam training with periodic prototype projection.

    Returns ``(model, history)`` where history holds one dict per epoch with
    the mean loss breakdown and the train/test accuracy.
    """
    config = config or TrainConfig()
    if model is None:
        model = init_model(encoder_config, num_pos=config.num_pos, num_neg=config.num_neg,
                           alpha=config.alpha, seed=config.seed)
    else:
        model = model.copy()
    images = np.asarray(train_images, dtype=float)
    labels = np.asarray(train_labels, dtype=int)
    rng = np.random.default_rng([config.seed, 2])
    state = tn.AdamState()
    arrays = model.trainables()
    lrs = {k: config.lr_for(k) for k in arrays}
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(images))
        sums = np.zeros(6)
        batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            params = {k: tn.Tensor(v, requires_grad=True) for k, v in arrays.items()}
            breakdown, total = total_loss(images[idx], labels[idx], model, config, params)
            if not np.isfinite(breakdown.total):
                raise TrainingDiverged(epoch, breakdown)
            total.backward()
            grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
            tn.adam_step(arrays, grads, lrs, state)
            sums += [breakdown.balance, breakdown.pos_clst, breakdown.neg_clst,
                     breakdown.neg_sep, breakdown.pos_sep, breakdown.total]
            batches += 1
        if epoch >= config.projection_start and (epoch - config.projection_start) % config.projection_period == 0:
            projected = project_prototypes(model, images, labels)
            model.prototypes.pos[...] = projected.pos
            model.prototypes.neg[...] = projected.neg
            model.prototypes.pos_source[...] = projected.pos_source
            model.prototypes.neg_source[...] = projected.neg_source
        row = dict(zip(("balance", "pos_clst", "neg_clst", "neg_sep", "pos_sep", "total"), sums / batches))
        row["epoch"] = epoch
        row["train_acc"] = accuracy(predict_labels(images, model), labels)
        row["test_acc"] = (accuracy(predict_labels(test_images, model), test_labels)
                           if test_images is not None and len(test_images) else float("nan"))
        history.append(row)
        log.info("epoch %d total %.4f train %.3f test %.3f", epoch, row["total"],
                 row["train_acc"], row["test_acc"])
        if callback is not None:
            callback(row)
    return model, history


LOG_COLUMNS = ("epoch", "balance", "pos_clst", "neg_clst", "neg_sep", "pos_sep", "total",
               "train_acc", "test_acc")


def write_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
