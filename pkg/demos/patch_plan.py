"""
Patches, grids and the visible region
=====================================

An image is split into overlapping patches on a stride lattice. Each patch
is made of whole grid cells, and the cells outside the selected patch are
the tokens the masked autoencoder gets to see.
"""

import numpy as np

from maediff.patching import (
    compose_partial, coverage_counts, enumerate_patches, grids_for_patch, make_mask, visible_grids,
)

plan = enumerate_patches(96, 96, p=48, s=16, r=16)
print(f"{plan.K} patches, {plan.n_grids} grid cells of {plan.r}x{plan.r}")

# %%
# Coverage: how many patches contain each pixel. Corners get one,
# the centre gets nine, and reconstruction divides by these counts.
cov = coverage_counts(plan)
print(cov[::16, ::16])

# %%
# For patch 5 the masked cells and the visible ones partition the grid.
k = 5
print("masked cells :", grids_for_patch(plan, k))
print("visible cells:", len(visible_grids(plan, k)))

# %%
# The model input keeps clean pixels outside the patch and noisy ones inside.
rng = np.random.default_rng(0)
x0 = rng.random((96, 96))
noisy = x0 + rng.standard_normal((96, 96))
mixed = compose_partial(noisy, x0, make_mask(plan, k))
print("changed pixels:", int((mixed != x0).sum()), "=", plan.p ** 2)
