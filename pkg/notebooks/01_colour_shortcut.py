# coding: utf-8

# # A digit set with a colour shortcut
#
# Every training image is a small handwritten digit on a solid background.
# Nine times out of ten the background colour is the class's "own" colour, so a
# model can score 90% on training data without ever looking at the digit.  The
# out-of-distribution (OOD) test split draws the colour uniformly instead.

# In[1]:

from pathlib import Path

import numpy as np

from fedgid.analysis import write_ppm
from fedgid.datagen import DatasetSpec, dirichlet_partition, generate_dataset
from fedgid.intervention import mutual_information_bits

OUT = Path("notebook_output")
OUT.mkdir(exist_ok=True)

train = generate_dataset(DatasetSpec(seed=0, num_samples=6000))
ood = generate_dataset(DatasetSpec(seed=1, split="ood_test", num_samples=2000))
print(len(train), "train images of shape", train.pixels.shape[1:])


# How strong is the shortcut?  Count how often the colour id equals the label,
# and measure the mutual information between the two in bits.

# In[2]:

for name, s in [("train", train), ("ood_test", ood)]:
    print(f"{name:9s} P(colour == label) = {s.correlation():.3f}   "
          f"I(colour; label) = {mutual_information_bits(s.background_ids, s.labels):.2f} bits")


# Each image carries an exact object mask and its tight bounding box, which
# stand in for the detector output used to cut out backgrounds later.

# In[3]:

img = train[0]
x1, y1, x2, y2 = img.bbox
print("label", img.label, "colour", img.background_color_id, "bbox", img.bbox)
print(img.object_mask.astype(int))
# everything outside the mask is exactly one palette colour
print(np.unique(img.pixels[~img.object_mask].reshape(-1, 3), axis=0))


# A contact sheet: one row per class, ten examples each.  Colours line up with
# rows, which is exactly the shortcut.

# In[4]:

rows = []
for c in range(10):
    idx = np.flatnonzero(train.labels == c)[:10]
    rows.append(np.concatenate([np.pad(train.pixels[i], ((1, 1), (1, 1), (0, 0)), constant_values=1)
                                for i in idx], axis=1))
sheet = np.kron(np.concatenate(rows, axis=0), np.ones((4, 4, 1)))
write_ppm(OUT / "contact_sheet.ppm", sheet)
print("wrote", OUT / "contact_sheet.ppm")


# Federated clients get a Dirichlet(beta) share of every class.  Small beta
# means each client sees only a couple of classes, and therefore only a couple
# of colours.

# In[5]:

for beta in (0.1, 0.5, 100.0):
    part = dirichlet_partition(train.labels, 5, beta, seed=0)
    hist = np.array([np.bincount(train.labels[part.assignments[k]], minlength=10)
                     for k in range(5)])
    print(f"beta={beta}")
    print(hist)
