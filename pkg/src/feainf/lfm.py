"""Local Feature Masks: fixed masks that blend one focal cell with global context."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, as_tensor, make_op


@dataclass
class MaskBank:
    masks: np.ndarray  # (T, H1, W1, C1)
    alpha: float
    seed: int

    @property
    def num_regions(self):
        return self.masks.shape[0]

    @property
    def grid(self):
        return self.masks.shape[1], self.masks.shape[2]

    def focal(self, t):
        return focal_position(t, self.masks.shape[2])


def focal_position(t, w1):
    """Row and column of region ``t`` (0-based, row-major)."""
    return t // w1, t % w1


def build_masks(h1, w1, c1, alpha=0.1, seed=0):
    if min(h1, w1, c1) < 1:
        raise ValueError("mask bank dimensions must be positive")
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    rng = np.random.default_rng(seed)
    t_count = h1 * w1
    masks = alpha * rng.uniform(0.0, 1.0, size=(t_count, h1, w1, c1))
    for t in range(t_count):
        i, j = focal_position(t, w1)
        masks[t, i, j, :] += 1.0
    masks.setflags(write=False)
    return MaskBank(masks=masks, alpha=float(alpha), seed=int(seed))


def extract_features(feature_maps, bank, regions=None):
    """z_t = spatial mean of M_t * F, for every region (or just ``regions``).

    ``feature_maps`` is (N, H1, W1, C1) or (H1, W1, C1); the result is
    (N, T', C1) or (T', C1) to match.
    """
    f = as_tensor(feature_maps)
    single = f.ndim == 3
    if single:
        f = f.reshape((1,) + f.shape)
    if f.shape[1:] != bank.masks.shape[1:]:
        raise ShapeError("extract_features", f"feature maps {f.shape[1:]} vs masks {bank.masks.shape[1:]}")
    masks = bank.masks if regions is None else bank.masks[np.atleast_1d(regions)]
    n, h1, w1, c1 = f.shape
    area = h1 * w1
    # (C, N, HW) @ (C, HW, T) keeps the channel axis as a batch dimension
    fm = np.ascontiguousarray(f.data.reshape(n, area, c1).transpose(2, 0, 1))
    mm = np.ascontiguousarray(masks.reshape(len(masks), area, c1).transpose(2, 1, 0))
    out = (fm @ mm).transpose(1, 2, 0) / area

    def backward(g):
        gc = np.ascontiguousarray(g.transpose(2, 0, 1)) / area  # (C, N, T)
        gf = (gc @ mm.transpose(0, 2, 1)).transpose(1, 2, 0).reshape(f.shape)
        return (gf,)

    z = make_op(out, (f,), "lfm_extract", backward)
    if single:
        z = z.reshape(z.shape[1:])
    return z
