# coding: utf-8

# # Where do the models look, and do the clients agree?
#
# Two diagnostics on trained models:
#
# * Grad-CAM heatmaps over the convolutional feature map, and the share of
#   heat that falls inside the digit's bounding box;
# * a shared 2-D PCA of two clients' features on the same images, summarised
#   by the mean distance between a sample's two projections.

# In[1]:

from dataclasses import replace
from pathlib import Path

import numpy as np

from fedgid import analysis as A
from fedgid import experiment as E
from fedgid import model as M
from fedgid.datagen import DatasetSpec, generate_dataset

OUT = Path("notebook_output")
OUT.mkdir(exist_ok=True)
train = generate_dataset(DatasetSpec(seed=0, num_samples=6000))
test = E.ood_set_for(train)
base = replace(E.base_config(), num_rounds=8)
runs = {n: E.run_trial(E.variant_config(n, base), train, test, label=n) for n in ("fedavg", "+GI_FM+GD")}


# Grad-CAM.  The area-proportional baseline is what a heatmap spread evenly
# over the image would put inside the box.

# In[2]:

rng = np.random.default_rng(123)
sel = test.subset(np.sort(rng.choice(len(test), 100, replace=False)))
area = np.array([A.box_area_fraction(b, test.spec.image_size) for b in sel.bboxes])
for name, res in runs.items():
    heat, pred, _ = A.gradcam(res.params, sel.pixels)
    mass = np.array([A.box_mass_fraction(h, b) for h, b in zip(heat, sel.bboxes)])
    print(f"{name:10s} accuracy on these 100: {np.mean(pred == sel.labels):.2f}   "
          f"heat-in-box beats area share on {np.mean(mass > area):.0%} of images")
    A.write_pgm(OUT / f"cam_{E._slug(name)}_0.pgm", heat[0], scale=8)


# Feature alignment between clients 0 and 1 after the last round.

# In[3]:

x = sel.pixels
for name, res in runs.items():
    fa = M.encode(res.client_params[0], x)[1]
    fb = M.encode(res.client_params[1], x)[1]
    proj = A.project_features(fa, fb)
    A.scatter_ppm(OUT / f"features_{E._slug(name)}.ppm", proj)
    print(f"{name:10s} mean paired distance {A.paired_distance(proj):.3f}   "
          f"explained variance {np.round(proj.explained_variance, 3)}")
