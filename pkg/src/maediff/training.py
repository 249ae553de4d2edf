"""
Patch-wise training: simplex-noise one lattice patch, reconstruct the whole
image, and penalise the l1 error inside the noised patch only.
"""
from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import ConfigError, NumericError
from .patching import PatchPlan, compose_partial, mask_stack
from .schedule import NoiseSchedule, forward_diffuse
from .simplex import SimplexParams, fractal_field


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1600
    max_steps: Optional[int] = None
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    grad_clip: Optional[float] = None
    t_range: tuple[int, int] = (1, 1000)
    val_every: int = 100
    val_pairs: int = 4
    seed: int = 0

    def validate(self, T: Optional[int] = None) -> None:
        if self.epochs < 0 or (self.max_steps is not None and self.max_steps < 0):
            raise ConfigError("train.epochs and train.max_steps must be non-negative")
        if self.batch_size < 1 or not self.learning_rate > 0:
            raise ConfigError("train.batch_size and train.learning_rate must be positive")
        if self.val_every < 1 or self.val_pairs < 1:
            raise ConfigError("train.val_every and train.val_pairs must be positive")
        lo, hi = self.t_range
        if not 1 <= lo <= hi or (T is not None and hi > T):
            raise ConfigError(f"train.t_range={self.t_range} must satisfy 1 <= lo <= hi <= T={T}")

    def total_steps(self, n_train: int) -> int:
        if self.max_steps is not None:
            return self.max_steps
        return self.epochs * math.ceil(n_train / self.batch_size)


def masked_l1(x0: torch.Tensor, x0_rec: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over the masked pixels, averaged over the batch."""
    per_sample = ((x0 - x0_rec).abs() * mask).flatten(1).sum(1) / mask.flatten(1).sum(1)
    return per_sample.mean()


def simplex_noise_batch(n: int, shape: tuple[int, int], simplex: SimplexParams, rng: np.random.Generator):
    """``n`` standardized fractal fields with fresh random seeds, ``(n, 1, H, W)``."""
    seeds = rng.integers(0, 2**63, size=n)
    fields = [fractal_field(shape, SimplexParams(simplex.nu, simplex.octaves, simplex.gamma, int(s))) for s in seeds]
    return torch.from_numpy(np.stack(fields)[:, None].astype(np.float32))


@dataclass
class PatchBatch:
    x0: torch.Tensor
    x_tilde: torch.Tensor
    t: torch.Tensor
    patch: torch.Tensor
    mask: torch.Tensor


def make_patch_batch(x0: torch.Tensor, sched: NoiseSchedule, plan: PatchPlan, simplex: SimplexParams,
                     rng: np.random.Generator, t_range: Optional[tuple[int, int]] = None) -> PatchBatch:
    """Draw timestep, noise field and patch per sample and build the model input."""
    B = x0.shape[0]
    lo, hi = t_range or (1, sched.T)
    t = torch.from_numpy(rng.integers(lo, hi + 1, size=B))
    eps = simplex_noise_batch(B, (plan.H, plan.W), simplex, rng)
    k = torch.from_numpy(rng.integers(0, plan.K, size=B))
    x_t = forward_diffuse(x0, eps, t, sched)
    mask = mask_stack(plan, k.tolist())
    return PatchBatch(x0=x0, x_tilde=compose_partial(x_t, x0, mask), t=t, patch=k, mask=mask)


def train_step(batch: torch.Tensor, model, sched: NoiseSchedule, plan: PatchPlan, rng: np.random.Generator,
               optimizer: torch.optim.Optimizer, simplex: SimplexParams = SimplexParams(),
               t_range: Optional[tuple[int, int]] = None, grad_clip: Optional[float] = None,
               step: Optional[int] = None) -> float:
    model.train()
    pb = make_patch_batch(batch, sched, plan, simplex, rng, t_range)
    rec = model(pb.x_tilde, pb.t, pb.patch)
    loss = masked_l1(pb.x0, rec, pb.mask)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite loss at step {step}: t={pb.t.tolist()}, patch={pb.patch.tolist()}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def validation_loss(model, images: torch.Tensor, sched: NoiseSchedule, plan: PatchPlan,
                    simplex: SimplexParams, pairs: int, seed: int, batch_size: int = 32) -> float:
    """Masked l1 over a fixed, seeded sweep of (timestep, patch) pairs."""
    was_training = model.training
    model.eval()
    rng = np.random.default_rng([seed, 0x5EED])
    x0 = images.repeat_interleave(pairs, dim=0)
    total, count = 0.0, 0
    for i in range(0, x0.shape[0], batch_size):
        pb = make_patch_batch(x0[i:i + batch_size], sched, plan, simplex, rng)
        rec = model(pb.x_tilde, pb.t, pb.patch)
        total += float(masked_l1(pb.x0, rec, pb.mask)) * pb.x0.shape[0]
        count += pb.x0.shape[0]
    model.train(was_training)
    value = total / count
    if not math.isfinite(value):
        raise NumericError("non-finite validation loss")
    return value


class Trainer:
    """Owns the optimizer and the PRNG stream; resumable via ``state_dict``."""

    def __init__(self, model, sched: NoiseSchedule, plan: PatchPlan, cfg: TrainConfig,
                 simplex: SimplexParams = SimplexParams()):
        cfg.validate(sched.T)
        self.model = model
        self.sched = sched
        self.plan = plan
        self.cfg = cfg
        self.simplex = simplex
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0

    def train_step(self, images: torch.Tensor) -> float:
        n = images.shape[0]
        idx = self.rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)
        loss = train_step(images[torch.from_numpy(np.sort(idx))], self.model, self.sched, self.plan, self.rng,
                          self.optimizer, self.simplex, self.cfg.t_range, self.cfg.grad_clip, self.step)
        self.step += 1
        return loss

    def state_dict(self) -> dict:
        return {
            "model": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "rng": json.dumps(self.rng.bit_generator.state),
            "step": self.step,
        }

    def load_state_dict(self, state: dict) -> None:
        self.model.load_state_dict(state["model"])
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = json.loads(state["rng"])
        self.step = int(state["step"])


@dataclass
class FitResult:
    best_state: dict
    best_val: float
    best_step: int
    history: list = field(default_factory=list)


def fit(train_images: torch.Tensor, val_images: torch.Tensor, trainer: Trainer,
        on_record: Optional[Callable[[dict], None]] = None) -> FitResult:
    """Train for the configured number of steps, keeping the best validation checkpoint.

    Both image sets must be healthy; records are emitted as dicts with keys
    ``step``, ``loss``, ``val`` and ``wall_time``.
    """
    if train_images.shape[0] == 0 or val_images.shape[0] == 0:
        raise ConfigError("training and validation sets must be non-empty")
    cfg = trainer.cfg
    total = cfg.total_steps(train_images.shape[0])
    start = time.time()
    history = []

    def validate():
        return validation_loss(trainer.model, val_images, trainer.sched, trainer.plan, trainer.simplex,
                               cfg.val_pairs, cfg.seed, cfg.batch_size)

    def emit(rec):
        history.append(rec)
        if on_record is not None:
            on_record(rec)

    best_val = validate()
    best_step = trainer.step
    best_state = copy.deepcopy(trainer.model.state_dict())
    emit({"step": trainer.step, "loss": None, "val": best_val, "wall_time": time.time() - start})

    while trainer.step < total:
        loss = trainer.train_step(train_images)
        rec = {"step": trainer.step, "loss": loss, "val": None, "wall_time": time.time() - start}
        if trainer.step % cfg.val_every == 0 or trainer.step == total:
            rec["val"] = validate()
            if rec["val"] < best_val:
                best_val, best_step = rec["val"], trainer.step
                best_state = copy.deepcopy(trainer.model.state_dict())
        emit(rec)

    return FitResult(best_state=best_state, best_val=best_val, best_step=best_step, history=history)
