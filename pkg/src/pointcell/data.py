"""Synthetic point-annotated imagery, label noise, augmentation, dataset IO.

Images are light backgrounds with anti-aliased colored discs standing
in for cells; the annotation point is the disc center and the class is
encoded by disc color and size. Everything is a pure function of
(seed, index): regenerating an image is bit-identical.

On disk a dataset is
    images/<id>.png          8-bit RGB
    annotations/<id>.json    {"image": "<id>.png", "points": [{"x","y","class"}]}
    manifest.json            ids, train/test splits, generator echo

Point coordinates round-trip through JSON at full float precision.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, InfeasibleError, ShapeError, ValidationError
from .matching import GroundTruthSet
from .tensor import Tensor

_BASE_COLORS = (
    (0.55, 0.27, 0.07),
    (0.20, 0.30, 0.65),
    (0.20, 0.55, 0.25),
    (0.60, 0.20, 0.50),
    (0.85, 0.65, 0.15),
    (0.15, 0.55, 0.55),
)
_BACKGROUND = np.array([0.95, 0.93, 0.91])


@dataclass
class PointAnnotation:
    x: float
    y: float
    class_id: int


@dataclass
class AnnotatedImage:
    id: str
    pixels: np.ndarray  # (H, W, 3) floats in [0, 1]
    points: list[PointAnnotation]

    def ground_truth(self) -> GroundTruthSet:
        if not self.points:
            return GroundTruthSet(np.empty((0, 2)), np.empty(0, dtype=np.intp))
        return GroundTruthSet(
            np.array([[p.x, p.y] for p in self.points]),
            np.array([p.class_id for p in self.points], dtype=np.intp),
        )


@dataclass
class ClassAppearance:
    radius_range: tuple[float, float]
    color: tuple[float, float, float]
    color_std: float = 0.03
    intensity: float = 1.0


def default_appearances(num_classes: int) -> list[ClassAppearance]:
    out = []
    for c in range(num_classes):
        base = _BASE_COLORS[c % len(_BASE_COLORS)]
        lo = 3.0 + 0.4 * (c % 3)
        out.append(ClassAppearance(radius_range=(lo, lo + 1.6), color=base))
    return out


@dataclass
class GeneratorConfig:
    image_size: tuple[int, int] = (64, 64)  # (H, W)
    cell_count_range: tuple[int, int] = (3, 8)
    min_separation: float = 10.0
    num_classes: int = 4
    class_appearance: list[ClassAppearance] | None = None
    background_noise_std: float = 0.02
    label_noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ContractError(f"image_size must be at least 32x32, got {self.image_size}")
        lo, hi = self.cell_count_range
        if lo < 0 or hi < lo:
            raise ContractError(f"cell_count_range invalid: {self.cell_count_range}")
        if self.min_separation < 0:
            raise ContractError(f"min_separation must be non-negative, got {self.min_separation}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be at least 2, got {self.num_classes}")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ContractError(f"label_noise_rate must lie in [0, 1), got {self.label_noise_rate}")
        if self.background_noise_std < 0:
            raise ContractError("background_noise_std must be non-negative")
        if self.class_appearance is None:
            self.class_appearance = default_appearances(self.num_classes)
        if len(self.class_appearance) != self.num_classes:
            raise ContractError(
                f"{len(self.class_appearance)} appearance entries for {self.num_classes} classes"
            )


@dataclass
class AugmentationConfig:
    crop_scale_range: tuple[float, float] = (0.6, 1.0)
    horizontal_flip_prob: float = 0.5
    vertical_flip_prob: float = 0.5
    output_size: tuple[int, int] | None = None  # None keeps the input size

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ContractError(f"crop_scale_range must satisfy 0 < lo <= hi <= 1, got {self.crop_scale_range}")
        for p in (self.horizontal_flip_prob, self.vertical_flip_prob):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"flip probability {p} outside [0, 1]")


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _stamp_disc(pixels: np.ndarray, cx: float, cy: float, radius: float, color: np.ndarray) -> None:
    h, w, _ = pixels.shape
    x0 = max(int(math.floor(cx - radius - 1)), 0)
    x1 = min(int(math.ceil(cx + radius + 2)), w)
    y0 = max(int(math.floor(cy - radius - 1)), 0)
    y1 = min(int(math.ceil(cy + radius + 2)), h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    cov = np.clip(radius + 0.5 - d, 0.0, 1.0)[:, :, None]  # 1px anti-aliased rim
    pixels[y0:y1, x0:x1] = pixels[y0:y1, x0:x1] * (1 - cov) + color[None, None, :] * cov


def generate_image(config: GeneratorConfig, index: int) -> AnnotatedImage:
    """Deterministic scene for (config.seed, index)."""
    h, w = config.image_size
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, int(index)]))
    lo, hi = config.cell_count_range
    count = int(rng.integers(lo, hi + 1))

    centers: list[tuple[float, float]] = []
    budget = 1000 + 200 * count
    attempts = 0
    while len(centers) < count:
        if attempts >= budget:
            raise InfeasibleError(
                f"could not place {count} points with min_separation={config.min_separation} "
                f"in {w}x{h} after {budget} attempts"
            )
        attempts += 1
        x = float(rng.uniform(0.0, w - 1.0))
        y = float(rng.uniform(0.0, h - 1.0))
        if all(math.hypot(x - cx, y - cy) >= config.min_separation for cx, cy in centers):
            centers.append((x, y))

    classes = rng.integers(0, config.num_classes, size=count)
    pixels = np.tile(_BACKGROUND, (h, w, 1))
    points = []
    for (cx, cy), cls in zip(centers, classes):
        app = config.class_appearance[int(cls)]
        radius = float(rng.uniform(*app.radius_range))
        color = np.clip(
            (np.asarray(app.color) + rng.normal(0.0, app.color_std, size=3)) * app.intensity, 0.0, 1.0
        )
        _stamp_disc(pixels, cx, cy, radius, color)
        points.append(PointAnnotation(x=cx, y=cy, class_id=int(cls)))
    if config.background_noise_std:
        pixels = pixels + rng.normal(0.0, config.background_noise_std, size=pixels.shape)
    return AnnotatedImage(id=f"{index:06d}", pixels=np.clip(pixels, 0.0, 1.0), points=points)


def inject_label_noise(
    points: list[PointAnnotation], rate: float, num_classes: int, seed: int
) -> list[PointAnnotation]:
    """Symmetric noise: with probability rate, resample to a different class."""
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"rate must lie in [0, 1), got {rate}")
    rng = np.random.default_rng(seed)
    out = []
    for p in points:
        cls = p.class_id
        if rng.uniform() < rate:
            pick = int(rng.integers(0, num_classes - 1))
            cls = pick if pick < p.class_id else pick + 1
        out.append(PointAnnotation(x=p.x, y=p.y, class_id=cls))
    return out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def _sample_matrix(n_src: int, src: np.ndarray) -> np.ndarray:
    """Rows of bilinear taps at arbitrary source positions."""
    n_out = src.shape[0]
    r = np.zeros((n_out, n_src))
    s = np.clip(src, 0.0, n_src - 1.0)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w1 = s - i0
    np.add.at(r, (np.arange(n_out), i0), 1.0 - w1)
    np.add.at(r, (np.arange(n_out), i1), w1)
    return r


def augment(image: AnnotatedImage, config: AugmentationConfig, seed: int) -> AnnotatedImage:
    """Random resized crop then flips, with the same map applied to points."""
    h, w, _ = image.pixels.shape
    out_h, out_w = config.output_size or (h, w)
    rng = np.random.default_rng(seed)
    frac = float(rng.uniform(*config.crop_scale_range))
    crop_h = h * math.sqrt(frac)
    crop_w = w * math.sqrt(frac)
    top = float(rng.uniform(0.0, h - crop_h))
    left = float(rng.uniform(0.0, w - crop_w))
    flip_h = bool(rng.uniform() < config.horizontal_flip_prob)
    flip_v = bool(rng.uniform() < config.vertical_flip_prob)

    scale_y = crop_h / out_h
    scale_x = crop_w / out_w
    src_y = top + (np.arange(out_h) + 0.5) * scale_y - 0.5
    src_x = left + (np.arange(out_w) + 0.5) * scale_x - 0.5
    ry = _sample_matrix(h, src_y)
    rx = _sample_matrix(w, src_x)
    pixels = np.einsum("oh,hwc,pw->opc", ry, image.pixels, rx, optimize=True)

    points = []
    for p in image.points:
        if not (left <= p.x < left + crop_w and top <= p.y < top + crop_h):
            continue
        nx = (p.x - left + 0.5) / scale_x - 0.5
        ny = (p.y - top + 0.5) / scale_y - 0.5
        nx = min(max(nx, 0.0), out_w - 1.0)
        ny = min(max(ny, 0.0), out_h - 1.0)
        points.append(PointAnnotation(x=nx, y=ny, class_id=p.class_id))

    if flip_h:
        pixels = pixels[:, ::-1]
        for p in points:
            p.x = (out_w - 1.0) - p.x
    if flip_v:
        pixels = pixels[::-1]
        for p in points:
            p.y = (out_h - 1.0) - p.y
    return AnnotatedImage(id=f"{image.id}-aug", pixels=np.ascontiguousarray(pixels), points=points)


# ---------------------------------------------------------------------------
# dataset IO
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    items: list[AnnotatedImage]
    splits: dict[str, list[str]]
    manifest: dict = field(default_factory=dict)

    def by_id(self, image_id: str) -> AnnotatedImage:
        for it in self.items:
            if it.id == image_id:
                return it
        raise KeyError(image_id)

    def split_items(self, name: str) -> list[AnnotatedImage]:
        if name not in self.splits:
            raise ContractError(f"no split '{name}' in dataset (have {sorted(self.splits)})")
        index = {it.id: it for it in self.items}
        return [index[i] for i in self.splits[name]]


def assign_splits(ids: list[str], test_every: int = 5) -> dict[str, list[str]]:
    """Deterministic 4:1 interleave: every fifth image goes to test."""
    train, test = [], []
    for i, image_id in enumerate(ids):
        (test if i % test_every == test_every - 1 else train).append(image_id)
    return {"train": train, "test": test}


def generate_dataset(config: GeneratorConfig, n_images: int, apply_label_noise: bool = True) -> Dataset:
    """Generate n images with a 4:1 train/test interleave.

    Label noise (config.label_noise_rate) corrupts TRAIN annotations
    only; the test split keeps clean labels so evaluation measures
    true classes.
    """
    if n_images < 0:
        raise ContractError(f"n_images must be non-negative, got {n_images}")
    items = [generate_image(config, i) for i in range(n_images)]
    splits = assign_splits([it.id for it in items])
    if apply_label_noise and config.label_noise_rate > 0:
        train_ids = set(splits["train"])
        for idx, it in enumerate(items):
            if it.id in train_ids:
                it.points = inject_label_noise(
                    it.points, config.label_noise_rate, config.num_classes,
                    seed=np.random.SeedSequence([config.seed, 0x6E6F6973, idx]).generate_state(1)[0],
                )
    manifest = {
        "num_classes": config.num_classes,
        "image_size": list(config.image_size),
        "label_noise_rate": config.label_noise_rate,
        "label_noise_applied_to": "train" if (apply_label_noise and config.label_noise_rate > 0) else "none",
        "seed": config.seed,
        "generator": {
            "cell_count_range": list(config.cell_count_range),
            "min_separation": config.min_separation,
            "background_noise_std": config.background_noise_std,
        },
    }
    return Dataset(items=items, splits=splits, manifest=manifest)


def write_dataset(dataset: Dataset, directory: str | Path) -> None:
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for it in dataset.items:
        arr = np.clip(np.rint(it.pixels * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="RGB").save(root / "images" / f"{it.id}.png")
        ann = {
            "image": f"{it.id}.png",
            "points": [{"x": p.x, "y": p.y, "class": p.class_id} for p in it.points],
        }
        with open(root / "annotations" / f"{it.id}.json", "w") as f:
            json.dump(ann, f)
    manifest = dict(dataset.manifest)
    manifest["images"] = [it.id for it in dataset.items]
    manifest["splits"] = dataset.splits
    with open(root / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def read_dataset(directory: str | Path) -> Dataset:
    root = Path(directory)
    mpath = root / "manifest.json"
    try:
        with open(mpath) as f:
            manifest = json.load(f)
    except OSError as e:
        raise ValidationError(f"cannot read manifest {mpath}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"malformed manifest {mpath}: {e}") from e
    for key in ("images", "splits"):
        if key not in manifest:
            raise ValidationError(f"{mpath}: missing '{key}'")
    num_classes = manifest.get("num_classes")
    items = []
    for image_id in manifest["images"]:
        ipath = root / "images" / f"{image_id}.png"
        apath = root / "annotations" / f"{image_id}.json"
        try:
            with open(apath) as f:
                ann = json.load(f)
        except OSError as e:
            raise ValidationError(f"cannot read annotation {apath}: {e}") from e
        except json.JSONDecodeError as e:
            raise ValidationError(f"malformed annotation {apath}: {e}") from e
        if not ipath.exists():
            raise ValidationError(f"annotation {apath} references missing image {ipath}")
        try:
            with Image.open(ipath) as im:
                pixels = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        except OSError as e:
            raise ValidationError(f"cannot read image {ipath}: {e}") from e
        h, w, _ = pixels.shape
        points = []
        for rec in ann.get("points", []):
            try:
                p = PointAnnotation(x=float(rec["x"]), y=float(rec["y"]), class_id=int(rec["class"]))
            except (KeyError, TypeError, ValueError) as e:
                raise ValidationError(f"{apath}: malformed point record {rec}") from e
            if not (0 <= p.x < w and 0 <= p.y < h):
                raise ValidationError(f"{apath}: point ({p.x}, {p.y}) outside {w}x{h} image")
            if p.class_id < 0 or (num_classes is not None and p.class_id >= num_classes):
                raise ValidationError(f"{apath}: class id {p.class_id} invalid")
            points.append(p)
        items.append(AnnotatedImage(id=image_id, pixels=pixels, points=points))
    known = {it.id for it in items}
    for split, ids in manifest["splits"].items():
        stray = set(ids) - known
        if stray:
            raise ValidationError(f"split '{split}' references unknown images {sorted(stray)[:3]}")
    return Dataset(items=items, splits=manifest["splits"], manifest=manifest)


# ---------------------------------------------------------------------------
# model-side helpers
# ---------------------------------------------------------------------------


def image_to_tensor(pixels: np.ndarray) -> Tensor:
    """(H, W, 3) floats -> 1x3xHxW tensor."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ShapeError(f"expected HxWx3 pixels, got {pixels.shape}")
    return Tensor(np.ascontiguousarray(pixels.transpose(2, 0, 1))[None, :, :, :])


def pad_to_stride(pixels: np.ndarray, stride: int = 32) -> np.ndarray:
    """Edge-pad bottom/right so both dimensions divide the stride."""
    h, w, _ = pixels.shape
    ph = (stride - h % stride) % stride
    pw = (stride - w % stride) % stride
    if ph == 0 and pw == 0:
        return pixels
    return np.pad(pixels, ((0, ph), (0, pw), (0, 0)), mode="edge")
