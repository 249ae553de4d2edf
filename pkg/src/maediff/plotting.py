"""Static figure panels: one row per image, columns input | reconstruction | score | ground truth."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

COLUMNS = ("input", "reconstruction", "anomaly score", "ground truth")


def save_panels(rows, path, dpi: int = 100) -> None:
    if not rows:
        raise ValueError("no rows to plot")
    fig, axes = plt.subplots(len(rows), 4, figsize=(8, 2 * len(rows)), squeeze=False)
    for r, row in enumerate(rows):
        for c, (arr, title) in enumerate(zip(row, COLUMNS)):
            ax = axes[r, c]
            cmap = "inferno" if c == 2 else "gray"
            vmax = None if c == 2 else 1.0
            ax.imshow(arr, cmap=cmap, vmin=0.0, vmax=vmax)
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
