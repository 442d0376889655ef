"""Train the default network on synthetic lesion images, then look inside one prediction.

The default run takes about a minute on one CPU core.

Run:  python demos/02_train_and_predict.py
"""

import numpy as np

from feainf import SynthConfig, TrainConfig, generate, mean_pooled_baseline_predict, predict, run_training

# %% Data: 64x64 gray images; half carry one bright disc ("lesion").
train, test = generate(SynthConfig())
print(f"{len(train)} train / {len(test)} test images, {train.labels.mean():.0%} disease")

# %% Thirty epochs with prototype projection every ten.
model, history = run_training(train.images, train.labels, TrainConfig(), test.images, test.labels)
for row in history[::5] + [history[-1]]:
    print(f"epoch {row['epoch']:2d}  loss {row['total']:+.4f}  test acc {row['test_acc']:.3f}")

# %% One disease image: each of the 7x7 regions gets its own logit and the
# image logit is their maximum, so a single lesion region is enough.
sample = next(im for im in test if im.label == 1)
out = predict(sample.pixels, model)
grid = out.region_logits.reshape(7, 7)
print(f"\n{sample.id}: {out.label_name}, P(disease) = {out.prob_disease:.3f}")
print("region logits (rows of the 7x7 grid):")
print(np.array2string(grid, precision=2, suppress_small=True))
rows, cols = np.nonzero(sample.mask)
cell = 64 / 7
print(f"strongest region {divmod(out.region, 7)}; lesion centre at pixel "
      f"({rows.mean():.0f}, {cols.mean():.0f}), inside region "
      f"({int(rows.mean() // cell)}, {int(cols.mean() // cell)})")

# %% Averaging the region logits instead mixes the lesion's evidence with the
# healthy regions, which pulls the probability towards normal.  With enough
# healthy area it flips the answer; the acceptance suite builds such cases.
pooled = mean_pooled_baseline_predict(sample.pixels, model)
print(f"mean-pooled read-out: {pooled.label_name}, P(disease) = {pooled.prob_disease:.3f}")
