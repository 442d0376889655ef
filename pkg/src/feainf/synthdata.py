"""Deterministic synthetic "lesion" images with ground-truth masks."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, fields

import numpy as np

from .pnm import read_image, write_image


@dataclass
class SynthConfig:
    height: int = 64
    width: int = 64
    channels: int = 1
    n_train: int = 200
    n_test: int = 100
    disease_fraction: float = 0.5
    radius_min: float = 4.0
    radius_max: float = 7.0
    lesion_min: float = 0.35
    lesion_max: float = 0.45
    noise: float = 0.02
    background: str = "gradient"
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("train and test counts must be at least 1")
        if not 0 <= self.disease_fraction <= 1:
            raise ValueError("disease_fraction must lie in [0, 1]")
        if not 0 < self.radius_min <= self.radius_max:
            raise ValueError("need 0 < radius_min <= radius_max")
        if 2 * self.radius_max + 4 > min(self.height, self.width):
            raise ValueError("lesion radius does not fit the image")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if self.background not in ("gradient", "flat"):
            raise ValueError(f"unknown background kind {self.background!r}")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


@dataclass
class LabeledImage:
    id: str
    pixels: np.ndarray  # (H, W, C)
    label: int
    mask: np.ndarray  # (H, W) uint8


class Dataset(list):
    """List of LabeledImage with array views."""

    @property
    def images(self):
        return np.stack([im.pixels for im in self]) if len(self) else np.zeros((0,))

    @property
    def labels(self):
        return np.array([im.label for im in self], dtype=int)

    @property
    def masks(self):
        return np.stack([im.mask for im in self]) if len(self) else np.zeros((0,))


def _background(config, rng):
    h, w = config.height, config.width
    r = np.arange(h)[:, None] / (h - 1)
    c = np.arange(w)[None, :] / (w - 1)
    if config.background == "flat":
        base = np.full((h, w), 0.3)
    else:
        # brighter towards the bottom, a horizontal ripple, a dim upper-left corner
        base = 0.15 + 0.25 * r + 0.08 * (0.5 + 0.5 * np.cos(2 * np.pi * c))
        base -= 0.06 * np.exp(-((r - 0.15) ** 2 + (c - 0.2) ** 2) / 0.02)
    base = base + rng.uniform(-0.04, 0.04)
    return base + rng.normal(0.0, config.noise, size=(h, w))


def _lesion(config, rng):
    h, w = config.height, config.width
    radius = rng.uniform(config.radius_min, config.radius_max)
    margin = int(np.ceil(radius)) + 2
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    amp = rng.uniform(config.lesion_min, config.lesion_max)
    yy, xx = np.mgrid[0:h, 0:w]
    dist = np.hypot(yy - cy, xx - cx)
    profile = amp * np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return profile, (dist <= radius).astype(np.uint8)


def _make_split(config, n, prefix, rng):
    n_pos = int(round(n * config.disease_fraction))
    labels = np.array([1] * n_pos + [0] * (n - n_pos))
    rng.shuffle(labels)
    out = Dataset()
    for k, label in enumerate(labels):
        img = _background(config, rng)
        mask = np.zeros((config.height, config.width), dtype=np.uint8)
        if label == 1:
            blob, mask = _lesion(config, rng)
            img = img + blob
        img = np.clip(img, 0.0, 1.0)
        pixels = np.repeat(img[:, :, None], config.channels, axis=2)
        out.append(LabeledImage(f"{prefix}_{k:04d}", pixels, int(label), mask))
    return out


def generate(config=None):
    """(train, test) datasets; a pure function of the config."""
    config = config or SynthConfig()
    rng = np.random.default_rng(config.seed)
    train = _make_split(config, config.n_train, "train", rng)
    test = _make_split(config, config.n_test, "test", rng)
    return train, test


# ----------------------------------------------------------------------
# on-disk layout: <dir>/images/<id>.pgm, <dir>/masks/<id>.pgm, <dir>/labels.csv
def save_dataset(dataset, directory):
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    with open(os.path.join(directory, "labels.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"])
        for im in dataset:
            ext = "pgm" if im.pixels.shape[2] == 1 else "ppm"
            write_image(os.path.join(directory, "images", f"{im.id}.{ext}"), im.pixels)
            write_image(os.path.join(directory, "masks", f"{im.id}.pgm"), im.mask.astype(float))
            writer.writerow([im.id, im.label])


def load_dataset(directory):
    path = os.path.join(directory, "labels.csv")
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    out = Dataset()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ident = row["id"]
            img_path = os.path.join(directory, "images", f"{ident}.pgm")
            if not os.path.exists(img_path):
                img_path = os.path.join(directory, "images", f"{ident}.ppm")
            pixels = read_image(img_path)
            mask_path = os.path.join(directory, "masks", f"{ident}.pgm")
            if os.path.exists(mask_path):
                mask = (read_image(mask_path)[:, :, 0] > 0.5).astype(np.uint8)
            else:
                mask = np.zeros(pixels.shape[:2], dtype=np.uint8)
            out.append(LabeledImage(ident, pixels, int(row["label"]), mask))
    return out
