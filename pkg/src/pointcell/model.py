"""Encoder, feature aggregation, task heads, and proposal decoding.

The network maps a 1x3xHxW image to M point proposals, M = K anchors
per 32x32 cell. Pipeline: a 4-stage convolutional encoder (strides 4,
8, 16, 32) -> optional pyramidal aggregation onto the stride-32 grid
-> three head towers producing per-anchor coordinate offsets,
objectness logits, and class logits. Decoded coordinates are anchor +
offset, unclamped; probabilities come from softmax.

Parameters are float64 tensors in a flat name->Tensor registry. Each
parameter is initialized from its own RNG stream keyed by (seed,
crc32(name)), so adding or removing ablation-specific parameters never
shifts the initialization of the others.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .matching import ProposalSet
from .tensor import Tensor

DEFAULT_ANCHOR_OFFSETS = ((0, 0), (-8, -8), (-8, 8), (8, 8), (8, -8))


@dataclass
class BackboneConfig:
    stage_channels: tuple[int, ...] = (32, 64, 128, 256)
    pfa_channels: int = 128
    num_classes: int = 4
    anchors_per_cell: int = 5
    anchor_offsets: tuple[tuple[float, float], ...] = DEFAULT_ANCHOR_OFFSETS
    head_stride: int = 32
    pfa_enabled: bool = True
    independent_classifier_enabled: bool = True

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.anchor_offsets = tuple((float(dx), float(dy)) for dx, dy in self.anchor_offsets)
        if len(self.stage_channels) != 4 or any(c < 1 for c in self.stage_channels):
            raise ContractError(f"stage_channels must be 4 positive ints, got {self.stage_channels}")
        if self.pfa_channels < 1:
            raise ContractError(f"pfa_channels must be positive, got {self.pfa_channels}")
        if self.num_classes < 2:
            raise ContractError(f"num_classes must be at least 2, got {self.num_classes}")
        if len(self.anchor_offsets) != self.anchors_per_cell:
            raise ContractError(
                f"{len(self.anchor_offsets)} anchor offsets for K={self.anchors_per_cell}"
            )
        # four stride-2 downsamplings in the encoder (stem counts twice)
        if self.head_stride != 32:
            raise ContractError(f"head_stride must equal the encoder downsampling factor 32, got {self.head_stride}")


@dataclass
class AnchorGrid:
    """Initial anchor coordinates, cell-major (row-major cells) then offset index."""

    points: np.ndarray  # (M, 2) float, x then y
    cells_h: int
    cells_w: int
    k: int

    @property
    def count(self) -> int:
        return self.points.shape[0]


@dataclass
class HeadOutputs:
    offsets: Tensor            # (M, 2) pixel offsets
    objectness_logits: Tensor  # (M, 2) background, object
    class_logits: Tensor       # (M, C)


@dataclass
class ProposalGraph:
    """Decoded proposals as graph tensors (training path)."""

    coords: Tensor       # (M, 2)
    objectness: Tensor   # (M, 2) probabilities
    class_probs: Tensor  # (M, C) probabilities

    def to_proposal_set(self) -> ProposalSet:
        return ProposalSet(
            coords=self.coords.data.copy(),
            objectness=self.objectness.data.copy(),
            class_probs=self.class_probs.data.copy(),
        )


def build_anchor_grid(height: int, width: int, config: BackboneConfig) -> AnchorGrid:
    """One cell per 32x32 block, K anchors per cell, clamped inside the image."""
    s = config.head_stride
    if height < s or width < s:
        raise ShapeError(f"image {height}x{width} smaller than one {s}px cell")
    gh = math.ceil(height / s)
    gw = math.ceil(width / s)
    half = s / 2
    pts = np.empty((gh * gw * config.anchors_per_cell, 2))
    offs = np.asarray(config.anchor_offsets, dtype=np.float64)
    m = 0
    for cy in range(gh):
        for cx in range(gw):
            center_x = min(cx * s + half, width - 1.0)
            center_y = min(cy * s + half, height - 1.0)
            for dx, dy in offs:
                pts[m, 0] = min(max(center_x + dx, 0.0), width - 1.0)
                pts[m, 1] = min(max(center_y + dy, 0.0), height - 1.0)
                m += 1
    return AnchorGrid(points=pts, cells_h=gh, cells_w=gw, k=config.anchors_per_cell)


def _he_conv(rng: np.random.Generator, co: int, ci: int, k: int) -> np.ndarray:
    std = math.sqrt(2.0 / (ci * k * k))
    return rng.normal(0.0, std, size=(co, ci, k, k))


class PointModel:
    """Parameter registry plus the forward computation."""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self._build()

    # -- parameters -----------------------------------------------------------

    def _rng_for(self, name: str) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, zlib.crc32(name.encode())]))

    def _add_conv(self, name: str, co: int, ci: int, k: int, zero: bool = False) -> None:
        if zero:
            w = np.zeros((co, ci, k, k))
        else:
            w = _he_conv(self._rng_for(f"{name}.w"), co, ci, k)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(co), requires_grad=True)

    def _build(self) -> None:
        self._build_encoder()
        self._build_pfa()
        self._build_heads()

    def _build_encoder(self) -> None:
        prev = 3
        for s, ch in enumerate(self.config.stage_channels, start=1):
            self._add_conv(f"enc.s{s}.c1", ch, prev, 3)
            self._add_conv(f"enc.s{s}.c2", ch, ch, 3)
            prev = ch

    def _build_pfa(self) -> None:
        cfg = self.config
        if cfg.pfa_enabled:
            for s, ch in enumerate(cfg.stage_channels, start=1):
                self._add_conv(f"pfa.proj{s}", cfg.pfa_channels, ch, 1)
        else:
            self._add_conv("pfa.proj4", cfg.pfa_channels, cfg.stage_channels[3], 1)

    def _build_heads(self) -> None:
        cfg = self.config
        towers = ["reg", "det"] + (["cls"] if cfg.independent_classifier_enabled else [])
        for tower in towers:
            for r in (1, 2):
                self._add_conv(f"head.{tower}.rb{r}.c1", cfg.pfa_channels, cfg.pfa_channels, 3)
                self._add_conv(f"head.{tower}.rb{r}.c2", cfg.pfa_channels, cfg.pfa_channels, 3)
        k, c = cfg.anchors_per_cell, cfg.num_classes
        self._add_conv("head.reg.out", 2 * k, cfg.pfa_channels, 1, zero=True)
        self._add_conv("head.det.out", 2 * k, cfg.pfa_channels, 1, zero=True)
        self._add_conv("head.cls.out", c * k, cfg.pfa_channels, 1, zero=True)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise ContractError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
        for k, p in self.params.items():
            if arrays[k].shape != p.data.shape:
                raise ContractError(
                    f"parameter '{k}' shape {arrays[k].shape} != expected {p.data.shape}"
                )
            p.data = arrays[k].astype(np.float64).copy()

    # -- forward pieces -------------------------------------------------------

    def _conv(self, x: Tensor, name: str, stride: int, padding: int) -> Tensor:
        return T.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], stride=stride, padding=padding)

    def encode(self, image: Tensor) -> list[Tensor]:
        """Four feature maps at strides 4, 8, 16, 32."""
        if image.data.ndim != 4 or image.shape[0] != 1 or image.shape[1] != 3:
            raise ShapeError(f"expected 1x3xHxW image, got {image.shape}")
        h, w = image.shape[2], image.shape[3]
        s = self.config.head_stride
        if h % s or w % s:
            raise ShapeError(f"image {h}x{w} not divisible by stride {s}")
        stages = []
        x = image
        for i in range(1, 5):
            # stem downsamples twice; later stages once
            stride2 = 2 if i == 1 else 1
            x = T.relu(self._conv(x, f"enc.s{i}.c1", stride=2, padding=1))
            x = T.relu(self._conv(x, f"enc.s{i}.c2", stride=stride2, padding=1))
            stages.append(x)
        return stages

    def aggregate_pfa(self, stage_features: list[Tensor]) -> Tensor:
        if len(stage_features) != 4:
            raise ShapeError(f"expected 4 stage features, got {len(stage_features)}")
        batches = {f.shape[0] for f in stage_features}
        if len(batches) != 1:
            raise ShapeError(f"mismatched batch dims {sorted(batches)}")
        hs = [f.shape[2] for f in stage_features]
        if not all(hs[i] > hs[i + 1] for i in range(3)):
            raise ShapeError(f"stage heights must strictly decrease, got {hs}")
        deep = stage_features[3]
        out_h, out_w = deep.shape[2], deep.shape[3]
        if not self.config.pfa_enabled:
            return self._conv(deep, "pfa.proj4", stride=1, padding=0)
        acc = None
        for s, f in enumerate(stage_features, start=1):
            proj = self._conv(f, f"pfa.proj{s}", stride=1, padding=0)
            if proj.shape[2] != out_h or proj.shape[3] != out_w:
                proj = T.bilinear_resize(proj, out_h, out_w)
            acc = proj if acc is None else T.add(acc, proj)
        return acc

    def _residual_block(self, x: Tensor, name: str) -> Tensor:
        y = T.relu(self._conv(x, f"{name}.c1", stride=1, padding=1))
        y = self._conv(y, f"{name}.c2", stride=1, padding=1)
        return T.relu(T.add(y, x))

    def _tower(self, x: Tensor, tower: str) -> Tensor:
        x = self._residual_block(x, f"head.{tower}.rb1")
        return self._residual_block(x, f"head.{tower}.rb2")

    @staticmethod
    def _to_rows(maps: Tensor, k: int, per_anchor: int) -> Tensor:
        """(1, K*per_anchor, gh, gw) -> (M, per_anchor), cell-major then anchor index."""
        _, ch, gh, gw = maps.shape
        x = T.reshape(maps, (k, per_anchor, gh, gw))
        x = T.transpose(x, (2, 3, 0, 1))
        return T.reshape(x, (gh * gw * k, per_anchor))

    def run_heads(self, features: Tensor, grid: AnchorGrid) -> HeadOutputs:
        if features.data.ndim != 4 or features.shape[0] != 1:
            raise ShapeError(f"expected 1xCxGHxGW features, got {features.shape}")
        if features.shape[2] != grid.cells_h or features.shape[3] != grid.cells_w:
            raise ContractError(
                f"feature grid {features.shape[2]}x{features.shape[3]} does not match "
                f"anchor grid {grid.cells_h}x{grid.cells_w}"
            )
        cfg = self.config
        k, c = cfg.anchors_per_cell, cfg.num_classes
        reg_feat = self._tower(features, "reg")
        det_feat = self._tower(features, "det")
        cls_feat = self._tower(features, "cls") if cfg.independent_classifier_enabled else det_feat
        offsets = self._to_rows(self._conv(reg_feat, "head.reg.out", 1, 0), k, 2)
        obj_logits = self._to_rows(self._conv(det_feat, "head.det.out", 1, 0), k, 2)
        cls_logits = self._to_rows(self._conv(cls_feat, "head.cls.out", 1, 0), k, c)
        return HeadOutputs(offsets=offsets, objectness_logits=obj_logits, class_logits=cls_logits)

    def forward(self, image: Tensor) -> tuple[AnchorGrid, HeadOutputs]:
        grid = build_anchor_grid(image.shape[2], image.shape[3], self.config)
        stages = self.encode(image)
        features = self.aggregate_pfa(stages)
        heads = self.run_heads(features, grid)
        return grid, heads


def decode_proposals(grid: AnchorGrid, heads: HeadOutputs) -> ProposalGraph:
    """Refined coordinates anchor+offset; logits to probabilities."""
    m = grid.count
    for name, t in (("offsets", heads.offsets), ("objectness", heads.objectness_logits), ("class", heads.class_logits)):
        if t.shape[0] != m:
            raise ShapeError(f"{name} rows {t.shape[0]} != anchor count {m}")
    coords = T.add(heads.offsets, Tensor(grid.points))
    return ProposalGraph(
        coords=coords,
        objectness=T.softmax(heads.objectness_logits, axis=1),
        class_probs=T.softmax(heads.class_logits, axis=1),
    )
