"""
Simplex noise versus white noise
================================

Fractal simplex noise is the corruption used in training and inference.
This script builds one field, shows its octave decomposition and compares
its spatial correlation with Gaussian white noise.
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from maediff.simplex import SimplexParams, fractal_field, octave_terms

params = SimplexParams(seed=3)
field = fractal_field((96, 96), params)
terms = octave_terms((96, 96), params)
white = np.random.default_rng(0).standard_normal((96, 96))

# Each octave doubles the frequency and multiplies the amplitude by gamma.
for k, term in enumerate(terms):
    print(f"octave {k}: std {term.std():.3f}")


def neighbour_corr(a):
    return np.corrcoef(a[:, :-1].ravel(), a[:, 1:].ravel())[0, 1]


print(f"adjacent-pixel correlation: simplex {neighbour_corr(field):.3f}, white {neighbour_corr(white):.3f}")

fig, axes = plt.subplots(1, 4, figsize=(12, 3))
for ax, img, title in zip(axes, (terms[0], terms[3], field, white),
                          ("octave 0", "octave 3", "fractal sum", "white noise")):
    ax.imshow(img, cmap="gray")
    ax.set_title(title)
    ax.axis("off")
fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else "simplex_noise.png"
fig.savefig(out, dpi=80)
print("wrote", out)
