"""Overlay rendering, sweep CSV output, and small line plots.

Class colors follow a fixed palette for the first four classes and
golden-ratio hue stepping after that, so any number of classes gets a
stable, distinguishable color without configuration.
"""

from __future__ import annotations

import colorsys
import csv
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, ShapeError

_PALETTE = [
    (0.90, 0.12, 0.12),  # red
    (0.13, 0.72, 0.22),  # green
    (0.95, 0.83, 0.10),  # yellow
    (1.00, 0.45, 0.70),  # pink
]

_GOLDEN = 0.6180339887498949


def class_color(class_id: int) -> tuple[float, float, float]:
    if class_id < 0:
        raise ContractError(f"class id must be non-negative, got {class_id}")
    if class_id < len(_PALETTE):
        return _PALETTE[class_id]
    hue = (0.08 + _GOLDEN * (class_id - len(_PALETTE))) % 1.0
    return colorsys.hsv_to_rgb(hue, 0.85, 0.95)


def _blend_disc(out: np.ndarray, x: float, y: float, radius: float, color, ring: bool = False) -> None:
    h, w, _ = out.shape
    pad = radius + 1.5
    y0, y1 = int(max(np.floor(y - pad), 0)), int(min(np.ceil(y + pad) + 1, h))
    x0, x1 = int(max(np.floor(x - pad), 0)), int(min(np.ceil(x + pad) + 1, w))
    if y0 >= y1 or x0 >= x1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d = np.sqrt((yy - y) ** 2 + (xx - x) ** 2)
    if ring:
        alpha = np.clip(1.0 - np.abs(d - radius), 0.0, 1.0)
    else:
        alpha = np.clip(radius + 0.5 - d, 0.0, 1.0)
    patch = out[y0:y1, x0:x1]
    patch += alpha[:, :, None] * (np.asarray(color) - patch)


def render_overlay(
    pixels: np.ndarray,
    points: list[tuple[float, float, int]],
    gt_points: list[tuple[float, float, int]] | None = None,
    dot_radius: float = 2.5,
) -> np.ndarray:
    """Solid dots for predictions, rings for ground truth; returns a copy."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 pixels, got {pixels.shape}")
    out = np.array(pixels, dtype=np.float64, copy=True)
    for x, y, cid in points:
        _blend_disc(out, float(x), float(y), dot_radius, class_color(int(cid)))
    for x, y, cid in gt_points or []:
        _blend_disc(out, float(x), float(y), dot_radius + 2.0, class_color(int(cid)), ring=True)
    return np.clip(out, 0.0, 1.0)


def save_png(pixels: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.asarray(pixels) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(Path(path))


def write_csv(path: str | Path, header: list[str], rows: list[list]) -> None:
    """Rows are written exactly as given; every row must match the header."""
    for row in rows:
        if len(row) != len(header):
            raise ContractError(f"row has {len(row)} fields, header has {len(header)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def line_plot(
    path: str | Path,
    x: list[float],
    series: dict[str, list[float]],
    xlabel: str,
    ylabel: str,
    title: str = "",
) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5.0, 3.5), dpi=120)
    for name, ys in sorted(series.items()):
        if len(ys) != len(x):
            raise ContractError(f"series '{name}' has {len(ys)} values for {len(x)} x positions")
        ax.plot(x, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, alpha=0.3)
    if len(series) > 1:
        ax.legend()
    fig.tight_layout()
    fig.savefig(Path(path))
    plt.close(fig)
