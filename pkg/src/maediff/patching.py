"""
Hierarchical image partition: overlapping ``p x p`` patches on a stride-``s``
lattice, each made of whole ``r x r`` grid cells.

Geometry that does not tile exactly is rejected rather than padded.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigError


@dataclass(frozen=True)
class PatchPlan:
    H: int
    W: int
    p: int
    s: int
    r: Optional[int]
    origins: tuple[tuple[int, int], ...]

    @property
    def K(self) -> int:
        return len(self.origins)

    @property
    def grid_shape(self) -> tuple[int, int]:
        self._need_grid()
        return self.H // self.r, self.W // self.r

    @property
    def n_grids(self) -> int:
        gh, gw = self.grid_shape
        return gh * gw

    def _need_grid(self) -> None:
        if self.r is None:
            raise ConfigError("this plan was built without a grid size r")

    def _check_index(self, k: int) -> None:
        if not 0 <= k < self.K:
            raise IndexError(f"patch index {k} out of range [0, {self.K})")


def expected_patch_count(H: int, W: int, p: int, s: int) -> int:
    return (H - p + s) * (W - p + s) // (s * s)


def validate_geometry(H: int, W: int, p: int, s: int, r: Optional[int] = None) -> None:
    """Raise ``ConfigError`` naming the first violated tiling invariant."""
    for name, v in (("H", H), ("W", W), ("p", p), ("s", s)):
        if int(v) != v or v < 1:
            raise ConfigError(f"{name} must be a positive integer, got {v}")
    if p > H or p > W:
        raise ConfigError(f"patch size p={p} exceeds image size {H}x{W}")
    if (H - p) % s or (W - p) % s:
        raise ConfigError(f"(H - p) and (W - p) must be divisible by s: H={H}, W={W}, p={p}, s={s}")
    if r is None:
        return
    if int(r) != r or r < 1:
        raise ConfigError(f"r must be a positive integer, got {r}")
    if not r < p:
        raise ConfigError(f"grid size r={r} must be smaller than patch size p={p}")
    if s % r:
        raise ConfigError(f"stride s={s} must be divisible by grid size r={r}")
    if p % r:
        raise ConfigError(f"patch size p={p} must be divisible by grid size r={r}")
    if H % r or W % r:
        raise ConfigError(f"image size {H}x{W} must be divisible by grid size r={r}")


def enumerate_patches(H: int, W: int, p: int, s: int, r: Optional[int] = None) -> PatchPlan:
    validate_geometry(H, W, p, s, r)
    origins = tuple((i, j) for i in range(0, H - p + 1, s) for j in range(0, W - p + 1, s))
    assert len(origins) == expected_patch_count(H, W, p, s)
    return PatchPlan(H=H, W=W, p=p, s=s, r=r, origins=origins)


def make_mask(plan: PatchPlan, k: int) -> np.ndarray:
    """Boolean ``H x W`` mask that is True inside patch ``k``."""
    plan._check_index(k)
    i, j = plan.origins[k]
    m = np.zeros((plan.H, plan.W), dtype=bool)
    m[i:i + plan.p, j:j + plan.p] = True
    return m


def mask_stack(plan: PatchPlan, ks) -> torch.Tensor:
    """Float masks for a batch of patch indices, shaped ``(B, 1, H, W)``."""
    return torch.from_numpy(np.stack([make_mask(plan, int(k)) for k in ks])[:, None].astype(np.float32))


def coverage_counts(plan: PatchPlan) -> np.ndarray:
    """Number of patches covering each pixel."""
    cov = np.zeros((plan.H, plan.W), dtype=np.int64)
    for i, j in plan.origins:
        cov[i:i + plan.p, j:j + plan.p] += 1
    return cov


def _check_shapes(*arrays) -> None:
    shapes = {tuple(a.shape) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def compose_partial(x_t, x0, mask):
    """Noised values inside the patch, clean values outside."""
    _check_shapes(x_t, x0, mask)
    if isinstance(x_t, torch.Tensor):
        return torch.where(torch.as_tensor(mask, device=x_t.device).bool(), x_t, x0)
    return np.where(np.asarray(mask).astype(bool), x_t, x0)


def visible_region(x0, mask):
    """``x0`` with the selected patch zeroed."""
    _check_shapes(x0, mask)
    if isinstance(x0, torch.Tensor):
        return torch.where(torch.as_tensor(mask, device=x0.device).bool(), torch.zeros_like(x0), x0)
    return np.where(np.asarray(mask).astype(bool), np.zeros_like(x0), x0)


def grids_for_patch(plan: PatchPlan, k: int) -> tuple[int, ...]:
    """Row-major indices of the grid cells inside patch ``k``."""
    plan._check_index(k)
    _, gw = plan.grid_shape
    i, j = plan.origins[k]
    r, n = plan.r, plan.p // plan.r
    gi, gj = i // r, j // r
    return tuple((gi + a) * gw + (gj + b) for a in range(n) for b in range(n))


def visible_grids(plan: PatchPlan, k: int) -> tuple[int, ...]:
    masked = set(grids_for_patch(plan, k))
    return tuple(g for g in range(plan.n_grids) if g not in masked)


def visible_grid_table(plan: PatchPlan) -> torch.Tensor:
    """``(K, N - (p/r)^2)`` long tensor of visible grid indices per patch."""
    return torch.tensor([visible_grids(plan, k) for k in range(plan.K)], dtype=torch.long).reshape(plan.K, -1)
