"""
Anomaly-map post-processing and segmentation metrics.

Post-processing chain: median filter -> zero scores outside the eroded brain
mask -> binarize at a threshold -> drop connected components below a minimum
size. The threshold is chosen by a greedy sweep over score quantiles on an
unhealthy validation split.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, MetricError

CROSS = ndimage.generate_binary_structure(2, 1)
SQUARE = ndimage.generate_binary_structure(2, 2)


@dataclass(frozen=True)
class PostprocessConfig:
    median_kernel: int = 5
    erosion_cycles: int = 3
    min_component_size: int = 7
    connectivity: int = 8
    threshold_candidates: int = 200
    auprc_pooled: bool = True

    def validate(self) -> None:
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ConfigError(f"postprocess.median_kernel must be odd and positive, got {self.median_kernel}")
        if self.erosion_cycles < 0:
            raise ConfigError("postprocess.erosion_cycles must be >= 0")
        if self.min_component_size < 1:
            raise ConfigError("postprocess.min_component_size must be >= 1")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"postprocess.connectivity must be 4 or 8, got {self.connectivity}")
        if self.threshold_candidates < 1:
            raise ConfigError("postprocess.threshold_candidates must be >= 1")


def median_filter(score: np.ndarray, k: int) -> np.ndarray:
    """k x k median with edge replication at the borders."""
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"median kernel must be odd, got {k}")
    return ndimage.median_filter(np.asarray(score), size=k, mode="nearest")


def erode_mask(mask: np.ndarray, cycles: int) -> np.ndarray:
    """Repeated binary erosion with a 3x3 cross; pixels beyond the border count as background."""
    mask = np.asarray(mask, dtype=bool)
    if cycles <= 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=CROSS, iterations=cycles, border_value=0)


def remove_small_components(binary: np.ndarray, min_size: int = 7, connectivity: int = 8) -> np.ndarray:
    """Zero out connected components with fewer than ``min_size`` pixels."""
    binary = np.asarray(binary, dtype=bool)
    labels, n = ndimage.label(binary, structure=SQUARE if connectivity == 8 else CROSS)
    if n == 0:
        return binary.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]


def postprocess_score(score: np.ndarray, brain_mask: np.ndarray, ppc: PostprocessConfig) -> np.ndarray:
    """Median-filter a raw anomaly map and zero it outside the eroded brain mask."""
    smoothed = median_filter(score, ppc.median_kernel)
    return np.where(erode_mask(brain_mask, ppc.erosion_cycles), smoothed, 0.0).astype(np.float32)


def binarize(score: np.ndarray, threshold: float, ppc: PostprocessConfig) -> np.ndarray:
    return remove_small_components(np.asarray(score) > threshold, ppc.min_component_size, ppc.connectivity)


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def dataset_dice(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> float:
    """Dice of all images pooled into one volume."""
    return dice(np.concatenate([np.ravel(p) for p in preds]), np.concatenate([np.ravel(g) for g in gts]))


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision: sum over thresholds of precision times recall increment.

    Tied scores form a single threshold. Raises ``MetricError`` without positives.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ValueError(f"shape mismatch: {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("AUPRC is undefined without positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(labels[order])
    # last index of every run of tied scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = tp[ends]
    precision = tp / (ends + 1)
    recall_step = np.diff(np.r_[0, tp]) / n_pos
    # fsum: correctly rounded, so the result does not depend on summation order
    return math.fsum(recall_step * precision)


def l1_error(x0: np.ndarray, rec: np.ndarray, mask: np.ndarray) -> float:
    """Mean absolute error over the brain mask."""
    x0, rec = np.asarray(x0, dtype=np.float64), np.asarray(rec, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not x0.shape == rec.shape == mask.shape:
        raise ValueError(f"shape mismatch: {x0.shape}, {rec.shape}, {mask.shape}")
    if not mask.any():
        raise MetricError("l1 error is undefined on an empty mask")
    return float(np.abs(x0 - rec)[mask].mean())


def threshold_candidates(scores: Sequence[np.ndarray], n: int) -> np.ndarray:
    pooled = np.concatenate([np.ravel(s) for s in scores])
    return np.quantile(pooled, np.linspace(0.0, 1.0, n))


def mean_dice_at(threshold: float, scores, labels, ppc: PostprocessConfig) -> float:
    return float(np.mean([dice(binarize(s, threshold, ppc), g) for s, g in zip(scores, labels)]))


def threshold_sweep(val_scores: Sequence[np.ndarray], val_labels: Sequence[np.ndarray],
                    ppc: PostprocessConfig) -> tuple[np.ndarray, np.ndarray]:
    """Candidate thresholds and the mean per-image Dice each one achieves."""
    if len(val_scores) == 0 or len(val_scores) != len(val_labels):
        raise MetricError("threshold search needs a non-empty, matched set of scores and labels")
    if not any(np.any(g) for g in val_labels):
        raise MetricError("threshold search needs at least one positive label (Dice is undefined otherwise)")
    cands = threshold_candidates(val_scores, ppc.threshold_candidates)
    return cands, np.array([mean_dice_at(float(t), val_scores, val_labels, ppc) for t in cands])


def greedy_threshold(val_scores: Sequence[np.ndarray], val_labels: Sequence[np.ndarray],
                     ppc: PostprocessConfig) -> float:
    """Dice-maximising threshold among the candidate quantiles (lowest wins ties).

    Scores are expected to be post-processed already.
    """
    cands, dices = threshold_sweep(val_scores, val_labels, ppc)
    return float(cands[int(np.argmax(dices))])
