"""
Synthetic brain-like phantoms, lesion injection, tensor files and manifests.

Tensor file layout (little-endian)::

    b"MAED" | u16 version | u16 ndim | u32 dim * ndim | float32 payload (row-major)
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BadMagicError, ConfigError, TruncatedFileError, VersionMismatchError
from .simplex import SimplexParams, fractal_field

MAGIC = b"MAED"
FORMAT_VERSION = 1
SPLITS = ("train", "val-healthy", "val-unhealthy", "test-healthy", "test-unhealthy")
MANIFEST_VERSION = 1


@dataclass
class Phantom:
    image: np.ndarray
    brain_mask: np.ndarray
    anomaly_mask: np.ndarray
    lesion_sizes: tuple[int, ...] = ()


# ----------------------------------------------------------------------------
# tensor files

def save_tensor(path, tensor) -> None:
    arr = np.array(tensor, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<HH", FORMAT_VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a MAED tensor file")
    if len(data) < 8:
        raise TruncatedFileError(f"{path}: truncated header")
    version, ndim = struct.unpack_from("<HH", data, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    offset = 8 + 4 * ndim
    if len(data) < offset:
        raise TruncatedFileError(f"{path}: truncated shape header")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    n = int(np.prod(shape, dtype=np.int64))
    if len(data) < offset + 4 * n:
        raise TruncatedFileError(f"{path}: payload has {len(data) - offset} bytes, expected {4 * n}")
    if len(data) > offset + 4 * n:
        raise TruncatedFileError(f"{path}: {len(data) - offset - 4 * n} trailing bytes after payload")
    return np.frombuffer(data, dtype="<f4", count=n, offset=offset).reshape(shape).astype(np.float32)


# ----------------------------------------------------------------------------
# phantoms

def _ellipse(H, W, cy, cx, ay, ax, warp=None):
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    dy, dx = (yy - cy) / ay, (xx - cx) / ax
    rho = np.sqrt(dy**2 + dx**2)
    if warp is not None:
        rho = rho / warp(np.arctan2(dy, dx))
    return rho


def generate_phantom(seed: int, size: tuple[int, int] = (64, 64)) -> Phantom:
    """Healthy phantom: warped elliptical brain with nested tissue bands and soft texture.

    Intensities inside the brain lie in ``[0.1, 0.95]``; the background is 0.
    """
    H, W = size
    if H < 32 or W < 32:
        raise ConfigError(f"phantom size must be at least 32 per side, got {size}")
    rng = np.random.default_rng(seed)
    cy = H / 2 + rng.uniform(-0.04, 0.04) * H
    cx = W / 2 + rng.uniform(-0.04, 0.04) * W
    ay = rng.uniform(0.35, 0.42) * H
    ax = rng.uniform(0.32, 0.40) * W
    harm = rng.integers(2, 5)
    amp, phase = rng.uniform(0.0, 0.05), rng.uniform(0, 2 * np.pi)

    def warp(theta):
        return 1.0 + amp * np.cos(harm * theta + phase)

    rho = _ellipse(H, W, cy, cx, ay, ax, warp)
    brain = rho <= 1.0

    n_bands = int(rng.integers(2, 5))
    radii = np.sort(rng.uniform(0.25, 0.85, size=n_bands))[::-1]
    levels = rng.uniform(0.3, 0.8, size=n_bands + 1)
    image = np.full((H, W), levels[0])
    for radius, level in zip(radii, levels[1:]):
        image[rho <= radius] = level

    texture = fractal_field((H, W), SimplexParams(nu=2.0**-4, octaves=3, gamma=0.5,
                                                  seed=int(rng.integers(0, 2**63))))
    image = image + 0.05 * texture
    image = np.clip(image, 0.1, 0.95)
    image = np.where(brain, image, 0.0).astype(np.float32)
    return Phantom(image=image, brain_mask=brain, anomaly_mask=np.zeros_like(brain))


_STEPS = np.array([(-1, 0), (1, 0), (0, -1), (0, 1)])


def _grow_lesion(rng, allowed: np.ndarray, target: int) -> Optional[np.ndarray]:
    """Branching random walk from a random allowed pixel until ``target`` pixels are claimed."""
    cand = np.argwhere(allowed)
    if len(cand) == 0:
        return None
    start = tuple(cand[rng.integers(len(cand))])
    pixels = [start]
    claimed = {start}
    H, W = allowed.shape
    for _ in range(target * 50):
        if len(pixels) >= target:
            break
        y, x = pixels[rng.integers(len(pixels))]
        dy, dx = _STEPS[rng.integers(4)]
        ny, nx = y + dy, x + dx
        if 0 <= ny < H and 0 <= nx < W and allowed[ny, nx] and (ny, nx) not in claimed:
            claimed.add((ny, nx))
            pixels.append((ny, nx))
    if len(pixels) < target:
        return None
    out = np.zeros_like(allowed)
    out[tuple(np.array(pixels).T)] = True
    return out


def inject_anomaly(ph: Phantom, seed: int, min_size: int = 10, max_size: int = 200) -> Phantom:
    """Add 1-3 disjoint lesions with a constant intensity shift of magnitude 0.2-0.5.

    On small phantoms the lesion size is capped at a quarter of the brain area.
    """
    rng = np.random.default_rng(seed)
    brain = ph.brain_mask.astype(bool)
    max_size = min(max_size, int(brain.sum()) // 4)
    if max_size < min_size:
        raise ConfigError("brain mask too small to host a lesion")
    image = ph.image.copy()
    anomaly = ph.anomaly_mask.astype(bool).copy()
    sizes = []
    n = int(rng.integers(1, 4))
    for _ in range(n):
        target = int(rng.integers(min_size, max_size + 1))
        # keep a one-pixel gap so lesions never merge
        allowed = brain & ~_dilate(anomaly)
        blob = None
        for _attempt in range(20):
            blob = _grow_lesion(rng, allowed, target)
            if blob is not None:
                break
        if blob is None:
            raise ConfigError("could not place a lesion inside the brain mask")
        shift = rng.uniform(0.2, 0.5) * rng.choice([-1.0, 1.0])
        image[blob] = np.clip(image[blob] + shift, 0.0, 1.0)
        anomaly |= blob
        sizes.append(int(blob.sum()))
    return Phantom(image=image.astype(np.float32), brain_mask=ph.brain_mask.copy(), anomaly_mask=anomaly,
                   lesion_sizes=tuple(sizes))


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


# ----------------------------------------------------------------------------
# manifests

def item_seed(master: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([int(master) & (2**64 - 1), SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def split_counts(n_train: int, n_val: int, n_test: int) -> dict[str, int]:
    """``n_val`` and ``n_test`` apply to each healthy/unhealthy half."""
    return {"train": n_train, "val-healthy": n_val, "val-unhealthy": n_val,
            "test-healthy": n_test, "test-unhealthy": n_test}


def build_manifest(out_dir, n_train: int, n_val: int, n_test: int, seed: int,
                   size: tuple[int, int] = (64, 64)) -> dict:
    """Generate every split under ``out_dir`` and write ``manifest.json``.

    Unhealthy splits carry injected lesions; all others have empty anomaly masks.
    """
    counts = split_counts(n_train, n_val, n_test)
    if any(c < 0 for c in counts.values()):
        raise ConfigError("split counts must be non-negative")
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(img_dir, os.W_OK):
        raise ConfigError(f"output directory {img_dir} is not writable")

    entries = []
    for split, count in counts.items():
        for i in range(count):
            s = item_seed(seed, split, i)
            ph = generate_phantom(s, size)
            if split.endswith("unhealthy"):
                ph = inject_anomaly(ph, s ^ 0xA5A5A5A5)
            stem = f"{split}_{i:04d}"
            paths = {}
            for key, arr in (("image", ph.image), ("brain_mask", ph.brain_mask), ("anomaly_mask", ph.anomaly_mask)):
                rel = f"images/{stem}_{key}.maed"
                save_tensor(out_dir / rel, arr)
                paths[key] = rel
            entries.append({"id": stem, "split": split, "seed": s, **paths,
                            "lesion_sizes": list(ph.lesion_sizes)})

    manifest = {
        "version": MANIFEST_VERSION,
        "generator": {"seed": int(seed), "size": list(size), "counts": counts},
        "entries": entries,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    manifest["_root"] = str(Path(path).resolve().parent)
    return manifest


def load_split(manifest: dict, split: str) -> list[Phantom]:
    """Load every phantom of ``split``; paths are relative to the manifest."""
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}; expected one of {SPLITS}")
    root = Path(manifest.get("_root", "."))
    out = []
    for e in manifest["entries"]:
        if e["split"] != split:
            continue
        out.append(Phantom(
            image=load_tensor(root / e["image"]),
            brain_mask=load_tensor(root / e["brain_mask"]) > 0.5,
            anomaly_mask=load_tensor(root / e["anomaly_mask"]) > 0.5,
            lesion_sizes=tuple(e.get("lesion_sizes", ())),
        ))
    return out
