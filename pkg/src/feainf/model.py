"""Learnable state of the classifier: encoder, mask bank, prototypes, head weights."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderConfig, init_params
from .lfm import MaskBank, build_masks


@dataclass
class PrototypeSet:
    """Shared disease prototypes and per-region normal prototypes.

    ``pos`` is (K_pos, C1); ``neg`` is (T, K_neg, C1).  The ``*_source``
    arrays hold (image index, region) of the training feature each prototype
    was projected onto, or -1 before the first projection.
    """

    pos: np.ndarray
    neg: np.ndarray
    pos_source: np.ndarray = None
    neg_source: np.ndarray = None

    def __post_init__(self):
        if self.pos.ndim != 2 or self.pos.shape[0] < 1:
            raise ValueError("need at least one disease prototype")
        if self.neg.ndim != 3 or self.neg.shape[1] < 1:
            raise ValueError("need at least one normal prototype per region")
        if self.pos_source is None:
            self.pos_source = np.full((self.pos.shape[0], 2), -1, dtype=np.int64)
        if self.neg_source is None:
            self.neg_source = np.full(self.neg.shape[:2] + (2,), -1, dtype=np.int64)

    @property
    def num_pos(self):
        return self.pos.shape[0]

    @property
    def num_neg(self):
        return self.neg.shape[1]

    def copy(self):
        return PrototypeSet(self.pos.copy(), self.neg.copy(),
                            self.pos_source.copy(), self.neg_source.copy())


@dataclass
class ClassifierWeights:
    pos: np.ndarray  # (T, K_pos)
    neg: np.ndarray  # (T, K_neg)

    def copy(self):
        return ClassifierWeights(self.pos.copy(), self.neg.copy())


@dataclass
class ModelState:
    encoder_config: EncoderConfig
    encoder_params: dict
    bank: MaskBank
    prototypes: PrototypeSet
    weights: ClassifierWeights
    eps: float = 1e-12
    seed: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def num_regions(self):
        return self.encoder_config.num_regions

    def trainables(self):
        """Flat name -> array view of every trained parameter."""
        out = dict(self.encoder_params)
        out["proto.pos"] = self.prototypes.pos
        out["proto.neg"] = self.prototypes.neg
        out["head.pos"] = self.weights.pos
        out["head.neg"] = self.weights.neg
        return out

    def copy(self):
        return ModelState(
            encoder_config=self.encoder_config,
            encoder_params={k: v.copy() for k, v in self.encoder_params.items()},
            bank=self.bank,
            prototypes=self.prototypes.copy(),
            weights=self.weights.copy(),
            eps=self.eps,
            seed=self.seed,
            extra=dict(self.extra),
        )


def init_model(encoder_config=None, num_pos=10, num_neg=4, alpha=0.1, seed=0, eps=1e-12):
    """Fresh model: Kaiming encoder, frozen mask bank, U(0,1) prototypes, unit head weights."""
    cfg = encoder_config or EncoderConfig()
    rng = np.random.default_rng([seed, 1])
    h1, w1, c1 = cfg.feature_shape
    t_count = h1 * w1
    protos = PrototypeSet(
        pos=rng.uniform(0.0, 1.0, size=(num_pos, c1)),
        neg=rng.uniform(0.0, 1.0, size=(t_count, num_neg, c1)),
    )
    weights = ClassifierWeights(np.ones((t_count, num_pos)), np.ones((t_count, num_neg)))
    return ModelState(
        encoder_config=cfg,
        encoder_params=init_params(cfg, seed),
        bank=build_masks(h1, w1, c1, alpha=alpha, seed=seed + 7919),
        prototypes=protos,
        weights=weights,
        eps=eps,
        seed=seed,
    )
