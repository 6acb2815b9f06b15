# coding: utf-8

# # Inside one FedGID local step
#
# A client holds its local model and a frozen copy of the global model.  For a
# batch it computes three things:
#
# * the usual cross-entropy on its own predictions,
# * an intervention loss: its features are mixed with the *global* model's
#   features of a randomly paired background image, and the mixture must still
#   be classified with the original label,
# * a distillation loss pulling the local features towards the global ones.

# In[1]:

import numpy as np

from fedgid import model as M
from fedgid.datagen import DatasetSpec, generate_dataset
from fedgid.distillation import DistillConfig, feature_kl
from fedgid.federation import TrainConfig, fedgid_batch
from fedgid.intervention import InterventionConfig, sample_backgrounds

data = generate_dataset(DatasetSpec(seed=3, num_samples=64))
global_params = M.init_params(0, M.Arch())
local = M.init_params(1, M.Arch())


# Backgrounds: the bounding box of each digit is zeroed, and the results are
# shuffled within the batch so each image is paired with someone else's
# background.

# In[2]:

rng = np.random.default_rng(0)
backgrounds, perm = sample_backgrounds(data, rng)
print("pairing of the first 8 images:", perm[:8])
print("labels:                       ", data.labels[:8])
print("paired background colours:    ", data.background_ids[perm[:8]])
print("zeroed pixels in background 0:", int((backgrounds[0].sum(axis=-1) == 0).sum()))


# Feature-level mixing with alpha = 0.7.  alpha = 1 recovers the original
# features, alpha = 0 gives pure background features.

# In[3]:

_, f_i = M.encode(local, data.pixels)
_, f_b = M.encode(global_params, backgrounds)
for alpha in (1.0, 0.7, 0.0):
    mixed = alpha * f_i + (1 - alpha) * f_b
    print(f"alpha={alpha}:  |mixed - f_I| = {np.abs(mixed - f_i).mean():.4f}   "
          f"|mixed - f_B| = {np.abs(mixed - f_b).mean():.4f}")


# The distillation term is a KL divergence between per-sample softmaxes over
# the feature dimensions; it vanishes when local and global features agree.

# In[4]:

_, f_g = M.encode(global_params, data.pixels)
print("KL(f_I || f_G) =", feature_kl(f_i, f_g, 1.0))
print("KL(f_G || f_G) =", feature_kl(f_g, f_g, 1.0))


# All of this is wrapped in `fedgid_batch`, which returns the loss terms and
# the gradient of their weighted sum.  Switching the level from the final
# feature (GI_F) to the convolutional feature map (GI_FM) moves the mixing point
# earlier in the network.

# In[5]:

for level in ("GI_F", "GI_FM"):
    cfg = TrainConfig(intervention=InterventionConfig(level=level),
                      distill=DistillConfig(lambda_gd=5.0))
    terms, grads = fedgid_batch(local, global_params, data, cfg, np.random.default_rng(0))
    print(level, {k: round(float(v), 4) for k, v in terms.items()})
    print("   grad norms:", {k: round(float(np.linalg.norm(g)), 4) for k, g in grads.items()})
