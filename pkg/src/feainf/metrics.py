"""Classification and saliency-localisation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GroundTruth:
    """Lesion ground truth as a binary mask or an inclusive (row0, col0, row1, col1) box."""

    mask: np.ndarray = None
    box: tuple = None
    shape: tuple = None

    def __post_init__(self):
        if self.mask is not None:
            m = np.asarray(self.mask)
            if not np.isin(m, (0, 1)).all():
                raise ValueError("ground-truth mask must be binary")
            self.mask = m.astype(bool)
            self.shape = self.mask.shape
        elif self.box is not None:
            if self.shape is None:
                raise ValueError("a box ground truth needs the image shape")
            r0, c0, r1, c1 = self.box
            h, w = self.shape
            if not (0 <= r0 <= r1 < h and 0 <= c0 <= c1 < w):
                raise ValueError(f"box {self.box} outside image {self.shape}")
        else:
            raise ValueError("need a mask or a box")

    @property
    def kind(self):
        return "foreground-mask" if self.box is None else "bounding-box"

    def region(self):
        if self.box is None:
            return self.mask
        r0, c0, r1, c1 = self.box
        out = np.zeros(self.shape, dtype=bool)
        out[r0:r1 + 1, c0:c1 + 1] = True
        return out


def _as_region(gt):
    return gt.region() if isinstance(gt, GroundTruth) else np.asarray(gt).astype(bool)


def bounding_box(mask):
    """Inclusive bounding box of a nonempty binary mask."""
    rows = np.flatnonzero(np.asarray(mask).any(axis=1))
    cols = np.flatnonzero(np.asarray(mask).any(axis=0))
    if len(rows) == 0:
        raise ValueError("empty mask has no bounding box")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def descending_cutoff(values, percentile):
    """Value of rank ceil(percentile% of N) in descending order."""
    if not 0 < percentile < 100:
        raise ValueError("percentile must lie in (0, 100)")
    flat = np.sort(np.asarray(values, dtype=float).ravel())[::-1]
    k = max(1, int(np.ceil(len(flat) * percentile / 100.0 - 1e-9)))
    return flat[k - 1]


def binarize(saliency, percentile=20.0):
    """1 where the map reaches the descending-percentile cutoff (ties kept)."""
    s = np.asarray(getattr(saliency, "values", saliency), dtype=float)
    return (s >= descending_cutoff(s, percentile)).astype(np.uint8)


def _ratio(num, den):
    return num / den if den > 0 else 0.0


def confusion_metrics(pred, gt):
    """(dice, ppv, sensitivity); an empty denominator gives 0."""
    p = np.asarray(pred).astype(bool)
    g = _as_region(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} != ground truth {g.shape}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    return _ratio(2 * tp, fp + 2 * tp + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn)


def proportion(saliency, gt):
    """Share of saliency energy inside the ground-truth region."""
    s = np.asarray(getattr(saliency, "values", saliency), dtype=float)
    g = _as_region(gt)
    if s.shape != g.shape:
        raise ValueError(f"saliency shape {s.shape} != ground truth {g.shape}")
    total = s.sum()
    return float(s[g].sum() / total) if total > 0 else 0.0


def accuracy(predictions, truths):
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if pred.shape != true.shape:
        raise ValueError("predictions and truths differ in length")
    if pred.size == 0:
        raise ValueError("accuracy of an empty set")
    return float(np.mean(pred == true))
