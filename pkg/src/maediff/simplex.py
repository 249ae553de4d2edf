"""
Seeded 2D simplex noise and its multi-octave (fractal) sum.

The lattice gradient table is indexed through a permutation of ``0..255``
built by a Fisher-Yates shuffle driven by splitmix64, so a given seed gives
the same field on every platform. Octave ``k`` uses seed ``seed + k``,
frequency ``nu * 2**k`` and amplitude ``gamma**k``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError

_MASK64 = (1 << 64) - 1

# 2D projections of the 12 classic edge gradients of a cube.
_GRAD2 = np.array(
    [
        [1, 1], [-1, 1], [1, -1], [-1, -1],
        [1, 0], [-1, 0], [1, 0], [-1, 0],
        [0, 1], [0, -1], [0, 1], [0, -1],
    ],
    dtype=np.float64,
)

_F2 = 0.5 * (np.sqrt(3.0) - 1.0)
_G2 = (3.0 - np.sqrt(3.0)) / 6.0
# Scales the raw kernel sum into [-1, 1]; the attained maximum is ~0.998.
_SCALE = 70.0


@dataclass(frozen=True)
class SimplexParams:
    nu: float = 2.0**-6
    octaves: int = 6
    gamma: float = 0.8
    seed: int = 0

    def validate(self) -> None:
        if not self.nu > 0:
            raise ConfigError(f"simplex.nu must be positive, got {self.nu}")
        if int(self.octaves) != self.octaves or self.octaves < 1:
            raise ConfigError(f"simplex.octaves must be an integer >= 1, got {self.octaves}")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"simplex.gamma must lie in (0, 1), got {self.gamma}")


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step: returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


@lru_cache(maxsize=256)
def permutation_table(seed: int) -> np.ndarray:
    """Seed-shuffled permutation of 0..255, doubled to 512 entries."""
    state = int(seed) & _MASK64
    perm = list(range(256))
    for i in range(255, 0, -1):
        state, r = splitmix64(state)
        j = r % (i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    table = np.array(perm + perm, dtype=np.int64)
    table.setflags(write=False)
    return table


def simplex2d(seed: int, x, y):
    """Evaluate 2D simplex noise at ``(x, y)``; broadcasts over arrays.

    Returns a float for scalar inputs, otherwise an ``ndarray``. Values lie in
    ``[-1, 1]``.
    """
    perm = permutation_table(int(seed) & _MASK64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x, y = np.broadcast_arrays(x, y)
    scalar = x.ndim == 0

    s = (x + y) * _F2
    i = np.floor(x + s)
    j = np.floor(y + s)
    t = (i + j) * _G2
    x0 = x - (i - t)
    y0 = y - (j - t)

    upper = x0 > y0
    i1 = upper.astype(np.int64)
    j1 = 1 - i1

    x1 = x0 - i1 + _G2
    y1 = y0 - j1 + _G2
    x2 = x0 - 1.0 + 2.0 * _G2
    y2 = y0 - 1.0 + 2.0 * _G2

    ii = i.astype(np.int64) & 255
    jj = j.astype(np.int64) & 255
    gi0 = perm[ii + perm[jj]] % 12
    gi1 = perm[ii + i1 + perm[jj + j1]] % 12
    gi2 = perm[ii + 1 + perm[jj + 1]] % 12

    total = np.zeros_like(x)
    for gi, dx, dy in ((gi0, x0, y0), (gi1, x1, y1), (gi2, x2, y2)):
        falloff = 0.5 - dx * dx - dy * dy
        g = _GRAD2[gi]
        contrib = falloff**4 * (g[..., 0] * dx + g[..., 1] * dy)
        total += np.where(falloff > 0, contrib, 0.0)

    out = _SCALE * total
    return float(out) if scalar else out


def octave_terms(shape: tuple[int, int], params: SimplexParams) -> np.ndarray:
    """Per-octave amplitude-weighted fields, stacked as ``(octaves, H, W)``."""
    params.validate()
    H, W = shape
    if H < 1 or W < 1:
        raise ConfigError(f"field shape must be positive, got {shape}")
    ii, jj = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    terms = np.empty((params.octaves, H, W), dtype=np.float64)
    for k in range(params.octaves):
        freq = params.nu * 2.0**k
        terms[k] = params.gamma**k * simplex2d(int(params.seed) + k, ii * freq, jj * freq)
    return terms


def fractal_field(shape: tuple[int, int], params: SimplexParams, standardize: bool = True) -> np.ndarray:
    """Fractal simplex field, standardized to zero mean and unit variance.

    Raises ``ConfigError`` when the raw field has zero variance (e.g. 1x1),
    since it cannot be standardized.
    """
    raw = octave_terms(shape, params).sum(axis=0)
    if not standardize:
        return raw
    sd = raw.std()
    if not sd > 0:
        raise ConfigError(f"simplex field of shape {shape} has zero variance; cannot standardize")
    out = (raw - raw.mean()) / sd
    # second pass removes the residual rounding of the first
    return (out - out.mean()) / out.std()
