"""Density-regression baseline: Gaussian target maps, BCE+IOU loss,
a per-pixel density head on the shared encoder, and local-maximum
peak extraction.

This pipeline exists as the contrast case: recovering points from a
density map requires a minimum peak distance and a threshold, and
detection quality swings with those choices, whereas the point
pipeline has no such knobs.

Target maps stamp a peak-normalized Gaussian at each annotated point
and combine overlaps by elementwise max, which keeps values in [0, 1]
and the highest response exactly at each cell center.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import maximum_filter

from . import tensor as T
from .errors import ContractError, ShapeError
from .matching import GroundTruthSet
from .model import PointModel
from .tensor import Tensor


@dataclass
class PeakParams:
    min_distance: int = 6
    abs_threshold: float = 0.3

    def __post_init__(self):
        if self.min_distance < 1:
            raise ContractError(f"min_distance must be at least 1, got {self.min_distance}")
        if not 0.0 <= self.abs_threshold <= 1.0:
            raise ContractError(f"abs_threshold must lie in [0, 1], got {self.abs_threshold}")


def make_rdm(points: GroundTruthSet, height: int, width: int, kernel_size: int = 7, sigma: float = 6.0) -> np.ndarray:
    """Stamp a peak-1 Gaussian kernel at each point; overlaps take the max."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ContractError(f"kernel_size must be odd and positive, got {kernel_size}")
    if sigma <= 0:
        raise ContractError(f"sigma must be positive, got {sigma}")
    r = kernel_size // 2
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma * sigma))
    g /= g[r, r]  # peak exactly 1 at the center
    out = np.zeros((height, width))
    for x, y in points.coords:
        cx, cy = int(round(float(x))), int(round(float(y)))
        y0, y1 = max(cy - r, 0), min(cy + r + 1, height)
        x0, x1 = max(cx - r, 0), min(cx + r + 1, width)
        if y0 >= y1 or x0 >= x1:
            continue
        ky0, kx0 = y0 - (cy - r), x0 - (cx - r)
        patch = g[ky0 : ky0 + (y1 - y0), kx0 : kx0 + (x1 - x0)]
        out[y0:y1, x0:x1] = np.maximum(out[y0:y1, x0:x1], patch)
    return out


def bce_iou_loss(pred: Tensor, target: np.ndarray, w_bce: float = 0.8, w_iou: float = 0.2) -> Tensor:
    """w_bce * mean pixel BCE + w_iou * (1 - soft IOU)."""
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"prediction shape {pred.shape} != target {t.shape}")
    if w_bce < 0 or w_iou < 0:
        raise ContractError("loss weights must be non-negative")
    tt = Tensor(t)
    one_minus_t = Tensor(1.0 - t)
    bce = T.scale(
        T.mean_all(
            T.add(
                T.mul(tt, T.log(pred)),
                T.mul(one_minus_t, T.log(T.add_scalar(T.scale(pred, -1.0), 1.0))),
            )
        ),
        -1.0,
    )
    inter = T.sum_all(T.mul(pred, tt))
    union = T.add(T.sum_all(T.add(pred, tt)), T.scale(inter, -1.0))
    iou = T.divide(T.reshape(inter, (1,)), T.reshape(union, (1,)))
    loss_iou = T.add_scalar(T.scale(T.sum_all(iou), -1.0), 1.0)
    return T.add(T.scale(bce, w_bce), T.scale(loss_iou, w_iou))


def find_peaks(values: np.ndarray, params: PeakParams) -> list[tuple[float, float, float]]:
    """Local maxima above threshold, greedily thinned to pairwise
    Chebyshev separation >= min_distance, ordered by descending value
    (row-major on ties)."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ShapeError(f"density map must be 2-D, got shape {v.shape}")
    size = 2 * params.min_distance + 1
    local_max = (v == maximum_filter(v, size=size, mode="nearest")) & (v >= params.abs_threshold)
    ys, xs = np.nonzero(local_max)
    if ys.size == 0:
        return []
    vals = v[ys, xs]
    order = np.lexsort((xs, ys, -vals))  # descending value, then row-major
    accepted: list[tuple[float, float, float]] = []
    acc_y: list[int] = []
    acc_x: list[int] = []
    for idx in order:
        y, x = int(ys[idx]), int(xs[idx])
        ok = True
        for ay, ax_ in zip(acc_y, acc_x):
            if max(abs(ay - y), abs(ax_ - x)) < params.min_distance:
                ok = False
                break
        if ok:
            accepted.append((float(x), float(y), float(vals[idx])))
            acc_y.append(y)
            acc_x.append(x)
    return accepted


class DensityModel(PointModel):
    """Shared encoder + aggregation with a per-pixel density head.

    The stride-32 aggregate alone cannot localize cells between grid
    nodes, so it is upsampled to stride 4 and fused with a projected
    copy of the first encoder stage before the head convolutions; the
    final map is bilinearly upsampled to input resolution and squashed
    by a sigmoid. The last conv is zero-initialized, so an untrained
    model predicts exactly 0.5 everywhere.
    """

    def _build(self) -> None:
        self._build_encoder()
        self._build_pfa()
        ch = self.config.pfa_channels
        self._add_conv("dens.skip", ch, self.config.stage_channels[0], 1)
        self._add_conv("dens.c1", ch, ch, 3)
        self._add_conv("dens.c2", 1, ch, 3, zero=True)

    def forward(self, image: Tensor) -> Tensor:
        h, w = image.shape[2], image.shape[3]
        stages = self.encode(image)
        agg = self.aggregate_pfa(stages)
        up4 = T.bilinear_resize(agg, h // 4, w // 4)
        skip = self._conv(stages[0], "dens.skip", stride=1, padding=0)
        x = T.relu(T.add(up4, skip))
        x = T.relu(self._conv(x, "dens.c1", stride=1, padding=1))
        x = self._conv(x, "dens.c2", stride=1, padding=1)
        x = T.bilinear_resize(x, h, w)
        return T.sigmoid(x)

    def predict_map(self, image: Tensor) -> np.ndarray:
        with T.no_grad():
            out = self.forward(image)
        return out.data[0, 0]


def export_density_png(values: np.ndarray, path: str | Path) -> None:
    """16-bit grayscale PNG for inspection."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    arr = np.round(v * 65535.0).astype(np.uint16)
    Image.fromarray(arr).save(Path(path))
