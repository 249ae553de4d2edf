"""
Sequential patch-wise reconstruction with overlap averaging.

One noise field is drawn per image before the patch loop and reused for every
patch (``per_patch_noise=True`` re-draws it per patch instead). Per-patch
predictions are kept and reduced in patch-index order in float64, so the
result does not depend on the order patches are processed in.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import NumericError
from .patching import PatchPlan, compose_partial, make_mask
from .schedule import NoiseSchedule, forward_diffuse
from .simplex import SimplexParams, fractal_field

# denoiser(x_tilde (B,1,H,W), t (B,), patch_idx (B,)) -> x0_rec (B,1,H,W)
Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class ReconstructionResult:
    x0_rec: np.ndarray
    coverage: np.ndarray
    score: np.ndarray


def anomaly_map(x0, x0_rec):
    """Pixel-wise absolute residual."""
    if np.shape(x0) != np.shape(x0_rec):
        raise ValueError(f"shape mismatch: {np.shape(x0)} vs {np.shape(x0_rec)}")
    return np.abs(np.asarray(x0) - np.asarray(x0_rec))


def _noise(shape, simplex: SimplexParams, seed: int) -> np.ndarray:
    p = SimplexParams(simplex.nu, simplex.octaves, simplex.gamma, int(seed))
    return fractal_field(shape, p).astype(np.float32)


@torch.no_grad()
def reconstruct(x0: np.ndarray, denoiser: Denoiser, sched: NoiseSchedule, plan: PatchPlan, t_test: int,
                seed: int, simplex: SimplexParams = SimplexParams(), order: Optional[Sequence[int]] = None,
                patch_batch: int = 16, per_patch_noise: bool = False) -> ReconstructionResult:
    """Reconstruct a single ``(H, W)`` image from its K partially noised versions."""
    x0 = np.asarray(x0, dtype=np.float32)
    if x0.shape != (plan.H, plan.W):
        raise ValueError(f"image shape {x0.shape} does not match plan {plan.H}x{plan.W}")
    sched.check_step(t_test)
    if isinstance(denoiser, torch.nn.Module):
        denoiser.eval()
    order = list(range(plan.K)) if order is None else [int(k) for k in order]
    if sorted(order) != list(range(plan.K)):
        raise ValueError("order must be a permutation of the patch indices")

    if per_patch_noise:
        seeds = np.random.default_rng(seed).integers(0, 2**63, size=plan.K)
        x_ts = {k: forward_diffuse(x0, _noise(x0.shape, simplex, seeds[k]), t_test, sched) for k in order}
    else:
        x_t = forward_diffuse(x0, _noise(x0.shape, simplex, seed), t_test, sched)

    preds = np.empty((plan.K, plan.H, plan.W), dtype=np.float32)
    for start in range(0, len(order), patch_batch):
        ks = order[start:start + patch_batch]
        inputs = []
        for k in ks:
            m = make_mask(plan, k)
            xt_k = x_ts[k] if per_patch_noise else x_t
            inputs.append(compose_partial(xt_k, x0, m))
        batch = torch.from_numpy(np.stack(inputs)[:, None].astype(np.float32))
        out = denoiser(batch, torch.full((len(ks),), t_test, dtype=torch.long), torch.tensor(ks, dtype=torch.long))
        out = out.detach().cpu().numpy().reshape(len(ks), plan.H, plan.W)
        if not np.all(np.isfinite(out)):
            raise NumericError(f"non-finite denoiser output for patches {ks}")
        preds[ks] = out

    acc = np.zeros((plan.H, plan.W), dtype=np.float64)
    coverage = np.zeros((plan.H, plan.W), dtype=np.int64)
    for k in range(plan.K):
        i, j = plan.origins[k]
        acc[i:i + plan.p, j:j + plan.p] += preds[k, i:i + plan.p, j:j + plan.p]
        coverage[i:i + plan.p, j:j + plan.p] += 1
    assert coverage.min() >= 1, "patch plan leaves pixels uncovered"
    x0_rec = (acc / coverage).astype(np.float32)
    return ReconstructionResult(x0_rec=x0_rec, coverage=coverage, score=anomaly_map(x0, x0_rec))


def reconstruct_many(images: Sequence[np.ndarray], denoiser: Denoiser, sched: NoiseSchedule, plan: PatchPlan,
                     t_test: int, seed: int, **kwargs) -> list[ReconstructionResult]:
    """Reconstruct a list of images; image ``i`` uses noise seed ``seed + i``."""
    return [reconstruct(img, denoiser, sched, plan, t_test, seed + i, **kwargs) for i, img in enumerate(images)]
