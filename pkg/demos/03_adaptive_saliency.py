"""Explain one prediction with adaptive-weight dynamic masks and compare with the
upsampled-similarity map.

The full explainer trains 9 mask sizes for 400 steps at each of 45 weights,
which takes several minutes per image.  This demo uses a lighter schedule;
pass --full for the default one.

Run:  python demos/03_adaptive_saliency.py [--full] [--out saliency.pgm]
"""

import argparse

import numpy as np

from feainf import (ExplainConfig, GroundTruth, SynthConfig, TrainConfig, explain, generate,
                    proportion, run_training, upsampled_similarity_baseline)
from feainf.metrics import bounding_box
from feainf.pnm import write_image

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--out", default=None, help="write the saliency map as a PGM")
args = parser.parse_args()

# %% A trained model (same recipe as demo 02).
train, test = generate(SynthConfig())
model, _ = run_training(train.images, train.labels, TrainConfig())
sample = next(im for im in test if im.label == 1)
gt = GroundTruth(mask=sample.mask)

# %% The explainer.  Each weight multiplier scales the per-size balance between
# "keep the node's feature" and "keep the mask small"; the search picks the
# multiplier whose stacked map has the fewest spurious local extrema.
light = ExplainConfig(sizes=(6, 8, 10, 12), iterations=150,
                      candidates=(0.01, 0.1, 0.5, 1, 2, 5, 10, 50, 100))
config = ExplainConfig() if args.full else light
result = explain(model, sample.pixels, config=config)
print(f"node region {result.node.region}, chosen weight {result.lam_nu:g}, "
      f"tau {result.saliency.tau:.3f}")
for lam in sorted(result.table):
    print(f"  weight {lam:8.3g}  tau {result.table[lam]:.3f}")

# %% Localisation: share of saliency mass inside the lesion.
base = upsampled_similarity_baseline(model, sample.pixels, node=result.node)
r0, c0, r1, c1 = bounding_box(sample.mask)
area = (r1 - r0 + 1) * (c1 - c0 + 1) / sample.mask.size
print(f"proportion  adaptive {proportion(result.saliency.values, gt):.3f}   "
      f"upsampled {proportion(base.values, gt):.3f}   (lesion box area {area:.3f})")

if args.out:
    v = result.saliency.values
    write_image(args.out, np.round(255 * v / max(v.max(), 1e-12)).astype(np.uint8))
    print("wrote", args.out)
