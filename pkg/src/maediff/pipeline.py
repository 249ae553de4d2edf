"""End-to-end orchestration: model construction, checkpoints, training and evaluation."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import RunConfig, from_dict
from .data import Phantom, load_split
from .errors import ConfigError
from .inference import reconstruct
from .metrics import (
    PostprocessConfig, auprc, binarize, dataset_dice, dice, greedy_threshold, l1_error,
    mean_dice_at, postprocess_score,
)
from .patching import PatchPlan, enumerate_patches
from .schedule import NoiseSchedule, build_linear_schedule
from .training import FitResult, Trainer, fit
from .unet import MAEDiffUNet, count_parameters

CHECKPOINT_FORMAT = "maediff-checkpoint"
CHECKPOINT_VERSION = 1


def build_plan(cfg: RunConfig) -> PatchPlan:
    pl = cfg.plan
    return enumerate_patches(pl.H, pl.W, pl.p, pl.s, pl.r)


def build_model(cfg: RunConfig, seed: Optional[int] = None) -> MAEDiffUNet:
    """Instantiate the denoiser; parameter init is seeded by ``seed`` (default: train seed)."""
    torch.manual_seed(cfg.train.seed if seed is None else seed)
    return MAEDiffUNet(cfg.unet, cfg.mae if cfg.unet.use_mae else None, build_plan(cfg))


def parameter_report(model: MAEDiffUNet) -> dict:
    return {"total": count_parameters(model), "mae": count_parameters(model.mae)}


def save_checkpoint(path, cfg: RunConfig, model_state: dict, trainer_state: Optional[dict] = None,
                    extra: Optional[dict] = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_json(),
        "model": {k: v.detach().cpu() for k, v in model_state.items()},
        "extra": json.dumps(extra or {}),
    }
    if trainer_state is not None:
        payload["trainer"] = trainer_state
    torch.save(payload, path)


def load_checkpoint(path) -> tuple[RunConfig, MAEDiffUNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a maediff checkpoint")
    cfg = from_dict(json.loads(payload["config"])).validate()
    model = build_model(cfg)
    model.load_state_dict(payload["model"])
    model.eval()
    return cfg, model, payload


def images_tensor(phantoms: Sequence[Phantom]) -> torch.Tensor:
    return torch.from_numpy(np.stack([p.image for p in phantoms])[:, None].astype(np.float32))


def train_from_manifest(cfg: RunConfig, manifest: dict, out_dir, resume: Optional[str] = None,
                        on_record: Optional[Callable[[dict], None]] = None) -> tuple[Path, FitResult]:
    """Fit on the healthy ``train`` split, select on ``val-healthy``; write ``best.pt`` and ``last.pt``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = load_split(manifest, "train")
    val = load_split(manifest, "val-healthy")
    if not train or not val:
        raise ConfigError("manifest must contain non-empty 'train' and 'val-healthy' splits")
    model = build_model(cfg)
    sched = build_linear_schedule(cfg.diffusion)
    trainer = Trainer(model, sched, model.plan, cfg.train, cfg.simplex)
    if resume:
        payload = torch.load(resume, map_location="cpu", weights_only=True)
        if "trainer" not in payload:
            raise ConfigError(f"{resume}: checkpoint carries no trainer state to resume from")
        trainer.load_state_dict(payload["trainer"])
    result = fit(images_tensor(train), images_tensor(val), trainer, on_record)
    best = out_dir / "best.pt"
    save_checkpoint(best, cfg, result.best_state,
                    extra={"best_val": result.best_val, "best_step": result.best_step})
    save_checkpoint(out_dir / "last.pt", cfg, trainer.model.state_dict(), trainer.state_dict())
    (out_dir / "config.json").write_text(cfg.to_json())
    return best, result


def score_phantoms(phantoms: Sequence[Phantom], denoiser, cfg: RunConfig, sched: NoiseSchedule,
                   plan: PatchPlan, seed_offset: int = 0):
    """Reconstruct every phantom; returns the list of ``ReconstructionResult``."""
    inf = cfg.inference
    return [
        reconstruct(ph.image, denoiser, sched, plan, cfg.diffusion.t_test, inf.seed + seed_offset + i,
                    cfg.simplex, patch_batch=inf.patch_batch, per_patch_noise=inf.per_patch_noise)
        for i, ph in enumerate(phantoms)
    ]


def segmentation_report(val_scores, val_labels, test_scores, test_labels, ppc: PostprocessConfig,
                        test_ids: Optional[Sequence[str]] = None) -> dict:
    """Fit the threshold on validation maps and score the test maps (all post-processed)."""
    thr = greedy_threshold(val_scores, val_labels, ppc)
    preds = [binarize(s, thr, ppc) for s, _ in zip(test_scores, test_labels)]
    dices = np.array([dice(p, g) for p, g in zip(preds, test_labels)])
    if ppc.auprc_pooled:
        ap = auprc(np.concatenate([np.ravel(s) for s in test_scores]),
                   np.concatenate([np.ravel(g) for g in test_labels]))
    else:
        ap = float(np.mean([auprc(s, g) for s, g in zip(test_scores, test_labels) if np.any(g)]))
    ids = list(test_ids) if test_ids is not None else [str(i) for i in range(len(test_scores))]
    return {
        "threshold": thr,
        "val_dice": mean_dice_at(thr, val_scores, val_labels, ppc),
        "dice_mean": float(dices.mean()),
        "dice_std": float(dices.std()),
        "dice_dataset": dataset_dice(preds, test_labels),
        "auprc": ap,
        "per_image": [{"id": i, "split": "test-unhealthy", "dice": float(d)} for i, d in zip(ids, dices)],
    }


def evaluate(cfg: RunConfig, manifest: dict, denoiser, random_baseline: bool = False) -> dict:
    """Threshold on ``val-unhealthy``, Dice/AUPRC on ``test-unhealthy``, l1 on ``test-healthy``."""
    ppc = cfg.postprocess
    sched = build_linear_schedule(cfg.diffusion)
    plan = build_plan(cfg)
    splits = {s: load_split(manifest, s) for s in ("val-unhealthy", "test-unhealthy", "test-healthy")}
    for name in ("val-unhealthy", "test-unhealthy"):
        if not splits[name]:
            raise ConfigError(f"manifest has no '{name}' images")
    test_ids = [e["id"] for e in manifest["entries"] if e["split"] == "test-unhealthy"]

    def processed(phs, results):
        return [postprocess_score(r.score, ph.brain_mask, ppc) for ph, r in zip(phs, results)]

    val_res = score_phantoms(splits["val-unhealthy"], denoiser, cfg, sched, plan, 0)
    test_res = score_phantoms(splits["test-unhealthy"], denoiser, cfg, sched, plan, 10_000)
    val_scores = processed(splits["val-unhealthy"], val_res)
    test_scores = processed(splits["test-unhealthy"], test_res)
    val_labels = [ph.anomaly_mask for ph in splits["val-unhealthy"]]
    test_labels = [ph.anomaly_mask for ph in splits["test-unhealthy"]]
    report = segmentation_report(val_scores, val_labels, test_scores, test_labels, ppc, test_ids)

    healthy = splits["test-healthy"]
    if healthy:
        h_res = score_phantoms(healthy, denoiser, cfg, sched, plan, 20_000)
        l1s = [l1_error(ph.image, r.x0_rec, ph.brain_mask) for ph, r in zip(healthy, h_res)]
        report["l1_mean"] = float(np.mean(l1s))
        h_ids = [e["id"] for e in manifest["entries"] if e["split"] == "test-healthy"]
        report["per_image"] += [{"id": i, "split": "test-healthy", "l1": float(v)} for i, v in zip(h_ids, l1s)]
    else:
        report["l1_mean"] = None

    if random_baseline:
        rng = np.random.default_rng(cfg.inference.seed)
        rand_val = [postprocess_score(rng.random(ph.image.shape), ph.brain_mask, ppc)
                    for ph in splits["val-unhealthy"]]
        rand_test = [postprocess_score(rng.random(ph.image.shape), ph.brain_mask, ppc)
                     for ph in splits["test-unhealthy"]]
        base = segmentation_report(rand_val, val_labels, rand_test, test_labels, ppc)
        report["random_baseline"] = {k: base[k] for k in ("threshold", "dice_mean", "dice_std", "auprc")}

    report["_maps"] = {
        "test-unhealthy": [(ph, r, s) for ph, r, s in zip(splits["test-unhealthy"], test_res, test_scores)],
    }
    return report


def public_report(report: dict) -> dict:
    """Drop in-memory arrays so the report can be serialised."""
    return {k: v for k, v in report.items() if not k.startswith("_")}
