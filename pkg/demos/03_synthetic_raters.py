"""Synthetic images with seven disagreeing raters.

Each rater thresholds the same soft blob at a slightly different level and
then dilates or erodes by one pixel, which mimics annotators who draw boundaries
a little inside or outside.
"""
# %%
import numpy as np

from raterseg.synthetic import DatasetManifest, generate_dataset

manifest = DatasetManifest(n_train=4, n_val=2, n_test=1, height=32, width=32, blur_sigma=1.0)
data = generate_dataset(manifest)
sample = data["train"][0]
print(sample.sample_id, "image", sample.image.shape, "masks", sample.masks.shape)

# %% Foreground area per rater, and where they disagree
areas = sample.masks.reshape(sample.num_raters, -1).sum(axis=1)
print("foreground pixels per rater:", areas)
mean = sample.rater_mean()[0]
ambiguous = (mean > 0) & (mean < 1)
print(f"{ambiguous.mean():.1%} of pixels have at least one dissenting rater")

# %% A coarse text rendering of the rater average: '#' all agree, '+' majority, '.' minority
rows = []
for row in mean[::2, ::1]:
    rows.append("".join("#" if v == 1 else "+" if v >= 0.5 else "." if v > 0 else " " for v in row))
print("\n".join(rows))
