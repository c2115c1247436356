"""Image grids and report figures."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image


def image_grid(rows: Sequence[Sequence[np.ndarray | None]], path: str | Path, scale: int = 3, pad: int = 1) -> Path:
    """Save a grid of [-1, 1] images; ``None`` cells are left blank (mid grey)."""
    cells = [c for r in rows for c in r if c is not None]
    if not cells:
        raise ValueError("grid has no images")
    c, h, w = np.asarray(cells[0]).shape
    ncol = max(len(r) for r in rows)
    canvas = np.full((len(rows) * (h + pad) + pad, ncol * (w + pad) + pad, c), 128, dtype=np.uint8)
    for i, r in enumerate(rows):
        for j, img in enumerate(r):
            if img is None:
                continue
            a = np.clip(np.rint((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            canvas[y : y + h, x : x + w] = np.moveaxis(a, 0, -1)
    im = Image.fromarray(canvas[..., 0] if c == 1 else canvas)
    im = im.resize((im.width * scale, im.height * scale), Image.NEAREST)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    im.save(path)
    return path


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_traces(traces: Sequence[Sequence[dict]], path: str | Path, keys=("L_pt", "L_R", "L_CE", "L_PG")) -> Path:
    """Mean of each loss term over attacks, per iteration (attacks that have
    stopped drop out of the mean)."""
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(keys), figsize=(3.2 * len(keys), 2.8))
    length = max((len(t) for t in traces), default=0)
    for ax, k in zip(np.atleast_1d(axes), keys):
        means = []
        for i in range(length):
            vals = [t[i][k] for t in traces if len(t) > i]
            means.append(float(np.mean(vals)))
        ax.plot(means)
        ax.set_title(k)
        ax.set_xlabel("iteration")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_matrix(matrix, rows: Sequence[str], cols: Sequence[str], path: str | Path, title: str = "") -> Path:
    plt = _pyplot()
    m = np.asarray(matrix, dtype=float)
    fig, ax = plt.subplots(figsize=(1.2 * len(cols) + 1.5, 1.0 * len(rows) + 1.2))
    ax.imshow(m, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(cols)), cols)
    ax.set_yticks(range(len(rows)), rows)
    for i in range(m.shape[0]):
        for j in range(m.shape[1]):
            ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", color="w" if m[i, j] < 0.6 else "k")
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path
