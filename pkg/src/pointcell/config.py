"""Run configuration: strict JSON parsing, dotted-path overrides, and a
round-trippable echo of the resolved settings.

Unknown keys are rejected with the offending path so typos fail loudly
instead of silently training with defaults. The JSON spelling "lambda"
maps to the loss attribute ``lam`` (the bare word is reserved in
Python).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import AugmentationConfig, GeneratorConfig
from .errors import ConfigError
from .losses import LossConfig
from .model import DEFAULT_ANCHOR_OFFSETS, BackboneConfig


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class DensityConfig:
    w_bce: float = 0.8
    w_iou: float = 0.2
    kernel_size: int = 7
    sigma: float = 6.0
    min_distance: int = 6
    abs_threshold: float = 0.3


@dataclass
class RunConfig:
    dataset: str = ""
    out_dir: str = ""
    seed: int = 0
    epochs: int = 1
    batch_size: int = 1
    eval_radius: float = 12.0
    detection_threshold: float = 0.5
    checkpoint_every: int = 0  # epochs between checkpoints; 0 keeps only the final one
    log_every: int = 50
    eval_every: int = 1  # epochs between logged test-split evaluations; 0 disables
    match_mode: str = "greedy"
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    density: DensityConfig = field(default_factory=DensityConfig)


# ---------------------------------------------------------------------------
# primitive readers
# ---------------------------------------------------------------------------


def _require_mapping(raw, path: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected an object, got {type(raw).__name__}")
    return raw

def _check_unknown(raw: dict, allowed, path: str) -> None:
    extra = set(raw) - set(allowed)
    if extra:
        key = sorted(extra)[0]
        prefix = f"{path}." if path else ""
        raise ConfigError(f"{prefix}{key}: unknown key")

def _get_num(raw: dict, key: str, default, path: str, integer: bool = False):
    if key not in raw:
        return default
    v = raw[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}{key}: expected a number, got {v!r}")
    if integer:
        if isinstance(v, float) and not v.is_integer():
            raise ConfigError(f"{path}{key}: expected an integer, got {v!r}")
        return int(v)
    return float(v)

def _get_bool(raw: dict, key: str, default, path: str) -> bool:
    if key not in raw:
        return default
    v = raw[key]
    if not isinstance(v, bool):
        raise ConfigError(f"{path}{key}: expected true/false, got {v!r}")
    return v

def _get_str(raw: dict, key: str, default, path: str) -> str:
    if key not in raw:
        return default
    v = raw[key]
    if not isinstance(v, str):
        raise ConfigError(f"{path}{key}: expected a string, got {v!r}")
    return v

def _get_pair(raw: dict, key: str, default, path: str, integer: bool = False):
    if key not in raw:
        return default
    v = raw[key]
    if not isinstance(v, (list, tuple)) or len(v) != 2:
        raise ConfigError(f"{path}{key}: expected a 2-element list, got {v!r}")
    out = []
    for item in v:
        if isinstance(item, bool) or not isinstance(item, (int, float)):
            raise ConfigError(f"{path}{key}: expected numbers, got {item!r}")
        out.append(int(item) if integer else float(item))
    return tuple(out)


# ---------------------------------------------------------------------------
# sections
# ---------------------------------------------------------------------------


def _parse_backbone(raw, path="backbone.") -> BackboneConfig:
    raw = _require_mapping(raw, path.rstrip("."))
    allowed = {
        "stage_channels", "pfa_channels", "num_classes", "anchors_per_cell",
        "anchor_offsets", "head_stride", "pfa_enabled", "independent_classifier_enabled",
    }
    _check_unknown(raw, allowed, path.rstrip("."))
    kwargs = {}
    if "stage_channels" in raw:
        v = raw["stage_channels"]
        if not isinstance(v, (list, tuple)) or not all(isinstance(c, int) and not isinstance(c, bool) for c in v):
            raise ConfigError(f"{path}stage_channels: expected a list of integers, got {v!r}")
        kwargs["stage_channels"] = tuple(v)
    if "anchor_offsets" in raw:
        v = raw["anchor_offsets"]
        if not isinstance(v, (list, tuple)):
            raise ConfigError(f"{path}anchor_offsets: expected a list of [dx, dy] pairs")
        kwargs["anchor_offsets"] = tuple(_get_pair({"o": o}, "o", None, f"{path}anchor_offsets.") for o in v)
    for key in ("pfa_channels", "num_classes", "anchors_per_cell", "head_stride"):
        got = _get_num(raw, key, None, path, integer=True)
        if got is not None:
            kwargs[key] = got
    for key in ("pfa_enabled", "independent_classifier_enabled"):
        got = _get_bool(raw, key, None, path)
        if got is not None:
            kwargs[key] = got
    try:
        return BackboneConfig(**kwargs)
    except Exception as exc:
        raise ConfigError(f"{path.rstrip('.')}: {exc}") from exc

def _parse_loss(raw, path="loss.") -> LossConfig:
    raw = _require_mapping(raw, path.rstrip("."))
    allowed = {"alpha", "beta", "gamma", "q", "lambda", "regression_squared", "classification_mean"}
    _check_unknown(raw, allowed, path.rstrip("."))
    kwargs = {}
    for key in ("alpha", "beta", "gamma", "q"):
        got = _get_num(raw, key, None, path)
        if got is not None:
            kwargs[key] = got
    got = _get_num(raw, "lambda", None, path)
    if got is not None:
        kwargs["lam"] = got
    for key in ("regression_squared", "classification_mean"):
        got = _get_bool(raw, key, None, path)
        if got is not None:
            kwargs[key] = got
    try:
        return LossConfig(**kwargs)
    except Exception as exc:
        raise ConfigError(f"{path.rstrip('.')}: {exc}") from exc

def _parse_augmentation(raw, path="augmentation.") -> AugmentationConfig:
    raw = _require_mapping(raw, path.rstrip("."))
    allowed = {"crop_scale_range", "horizontal_flip_prob", "vertical_flip_prob", "output_size"}
    _check_unknown(raw, allowed, path.rstrip("."))
    kwargs = {}
    got = _get_pair(raw, "crop_scale_range", None, path)
    if got is not None:
        kwargs["crop_scale_range"] = got
    for key in ("horizontal_flip_prob", "vertical_flip_prob"):
        got = _get_num(raw, key, None, path)
        if got is not None:
            kwargs[key] = got
    if raw.get("output_size") is not None:
        kwargs["output_size"] = _get_pair(raw, "output_size", None, path, integer=True)
    try:
        return AugmentationConfig(**kwargs)
    except Exception as exc:
        raise ConfigError(f"{path.rstrip('.')}: {exc}") from exc

def _parse_optimizer(raw, path="optimizer.") -> OptimizerConfig:
    raw = _require_mapping(raw, path.rstrip("."))
    allowed = {"lr", "weight_decay", "beta1", "beta2", "eps"}
    _check_unknown(raw, allowed, path.rstrip("."))
    d = OptimizerConfig()
    return OptimizerConfig(
        lr=_get_num(raw, "lr", d.lr, path),
        weight_decay=_get_num(raw, "weight_decay", d.weight_decay, path),
        beta1=_get_num(raw, "beta1", d.beta1, path),
        beta2=_get_num(raw, "beta2", d.beta2, path),
        eps=_get_num(raw, "eps", d.eps, path),
    )

def _parse_density(raw, path="density.") -> DensityConfig:
    raw = _require_mapping(raw, path.rstrip("."))
    allowed = {"w_bce", "w_iou", "kernel_size", "sigma", "min_distance", "abs_threshold"}
    _check_unknown(raw, allowed, path.rstrip("."))
    d = DensityConfig()
    return DensityConfig(
        w_bce=_get_num(raw, "w_bce", d.w_bce, path),
        w_iou=_get_num(raw, "w_iou", d.w_iou, path),
        kernel_size=_get_num(raw, "kernel_size", d.kernel_size, path, integer=True),
        sigma=_get_num(raw, "sigma", d.sigma, path),
        min_distance=_get_num(raw, "min_distance", d.min_distance, path, integer=True),
        abs_threshold=_get_num(raw, "abs_threshold", d.abs_threshold, path),
    )


_RUN_KEYS = {
    "dataset", "out_dir", "seed", "epochs", "batch_size", "eval_radius",
    "detection_threshold", "checkpoint_every", "log_every", "eval_every", "match_mode",
    "backbone", "loss", "augmentation", "optimizer", "density",
}


def parse_run_config(raw: dict) -> RunConfig:
    raw = _require_mapping(raw, "config")
    _check_unknown(raw, _RUN_KEYS, "")
    d = RunConfig()
    cfg = RunConfig(
        dataset=_get_str(raw, "dataset", d.dataset, ""),
        out_dir=_get_str(raw, "out_dir", d.out_dir, ""),
        seed=_get_num(raw, "seed", d.seed, "", integer=True),
        epochs=_get_num(raw, "epochs", d.epochs, "", integer=True),
        batch_size=_get_num(raw, "batch_size", d.batch_size, "", integer=True),
        eval_radius=_get_num(raw, "eval_radius", d.eval_radius, ""),
        detection_threshold=_get_num(raw, "detection_threshold", d.detection_threshold, ""),
        checkpoint_every=_get_num(raw, "checkpoint_every", d.checkpoint_every, "", integer=True),
        log_every=_get_num(raw, "log_every", d.log_every, "", integer=True),
        eval_every=_get_num(raw, "eval_every", d.eval_every, "", integer=True),
        match_mode=_get_str(raw, "match_mode", d.match_mode, ""),
        backbone=_parse_backbone(raw.get("backbone", {})),
        loss=_parse_loss(raw.get("loss", {})),
        augmentation=_parse_augmentation(raw.get("augmentation", {})),
        optimizer=_parse_optimizer(raw.get("optimizer", {})),
        density=_parse_density(raw.get("density", {})),
    )
    if cfg.batch_size != 1:
        raise ConfigError(f"batch_size: only 1 is supported, got {cfg.batch_size}")
    if cfg.match_mode not in ("greedy", "assignment"):
        raise ConfigError(f"match_mode: expected 'greedy' or 'assignment', got {cfg.match_mode!r}")
    if cfg.epochs < 0:
        raise ConfigError(f"epochs: must be non-negative, got {cfg.epochs}")
    if cfg.eval_radius <= 0:
        raise ConfigError(f"eval_radius: must be positive, got {cfg.eval_radius}")
    if not 0.0 <= cfg.detection_threshold <= 1.0:
        raise ConfigError(f"detection_threshold: must lie in [0, 1], got {cfg.detection_threshold}")
    if cfg.optimizer.lr < 0 or cfg.optimizer.weight_decay < 0:
        raise ConfigError("optimizer: lr and weight_decay must be non-negative")
    return cfg


def run_config_to_dict(cfg: RunConfig) -> dict:
    """Echo every resolved setting; parse_run_config(result) round-trips."""
    b, ls, a, o, de = cfg.backbone, cfg.loss, cfg.augmentation, cfg.optimizer, cfg.density
    return {
        "dataset": cfg.dataset,
        "out_dir": cfg.out_dir,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "eval_radius": cfg.eval_radius,
        "detection_threshold": cfg.detection_threshold,
        "checkpoint_every": cfg.checkpoint_every,
        "log_every": cfg.log_every,
        "eval_every": cfg.eval_every,
        "match_mode": cfg.match_mode,
        "backbone": {
            "stage_channels": list(b.stage_channels),
            "pfa_channels": b.pfa_channels,
            "num_classes": b.num_classes,
            "anchors_per_cell": b.anchors_per_cell,
            "anchor_offsets": [list(p) for p in b.anchor_offsets],
            "head_stride": b.head_stride,
            "pfa_enabled": b.pfa_enabled,
            "independent_classifier_enabled": b.independent_classifier_enabled,
        },
        "loss": {
            "alpha": ls.alpha,
            "beta": ls.beta,
            "gamma": ls.gamma,
            "q": ls.q,
            "lambda": ls.lam,
            "regression_squared": ls.regression_squared,
            "classification_mean": ls.classification_mean,
        },
        "augmentation": {
            "crop_scale_range": list(a.crop_scale_range),
            "horizontal_flip_prob": a.horizontal_flip_prob,
            "vertical_flip_prob": a.vertical_flip_prob,
            "output_size": list(a.output_size) if a.output_size is not None else None,
        },
        "optimizer": {
            "lr": o.lr,
            "weight_decay": o.weight_decay,
            "beta1": o.beta1,
            "beta2": o.beta2,
            "eps": o.eps,
        },
        "density": {
            "w_bce": de.w_bce,
            "w_iou": de.w_iou,
            "kernel_size": de.kernel_size,
            "sigma": de.sigma,
            "min_distance": de.min_distance,
            "abs_threshold": de.abs_threshold,
        },
    }


# ---------------------------------------------------------------------------
# generator section (for the dataset command)
# ---------------------------------------------------------------------------

_GEN_KEYS = {
    "count", "image_size", "cell_count_range", "min_separation", "num_classes",
    "background_noise_std", "label_noise_rate", "seed",
}


def parse_generator_config(raw: dict) -> tuple[GeneratorConfig, int]:
    """Returns the generator settings and the number of images to draw."""
    raw = _require_mapping(raw, "config")
    _check_unknown(raw, _GEN_KEYS, "")
    count = _get_num(raw, "count", 200, "", integer=True)
    if count < 0:
        raise ConfigError(f"count: must be non-negative, got {count}")
    d = GeneratorConfig()
    kwargs = dict(
        min_separation=_get_num(raw, "min_separation", d.min_separation, ""),
        num_classes=_get_num(raw, "num_classes", d.num_classes, "", integer=True),
        background_noise_std=_get_num(raw, "background_noise_std", d.background_noise_std, ""),
        label_noise_rate=_get_num(raw, "label_noise_rate", d.label_noise_rate, ""),
        seed=_get_num(raw, "seed", d.seed, "", integer=True),
    )
    got = _get_pair(raw, "image_size", None, "", integer=True)
    if got is not None:
        kwargs["image_size"] = got
    got = _get_pair(raw, "cell_count_range", None, "", integer=True)
    if got is not None:
        kwargs["cell_count_range"] = got
    try:
        return GeneratorConfig(**kwargs), count
    except Exception as exc:
        raise ConfigError(str(exc)) from exc


def generator_config_to_dict(cfg: GeneratorConfig, count: int) -> dict:
    return {
        "count": count,
        "image_size": list(cfg.image_size),
        "cell_count_range": list(cfg.cell_count_range),
        "min_separation": cfg.min_separation,
        "num_classes": cfg.num_classes,
        "background_noise_std": cfg.background_noise_std,
        "label_noise_rate": cfg.label_noise_rate,
        "seed": cfg.seed,
    }


# ---------------------------------------------------------------------------
# files and overrides
# ---------------------------------------------------------------------------


def load_config_file(path: str | Path) -> dict:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from exc
    return _require_mapping(raw, "config")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``a.b.c=value`` strings on top of a raw config dict.

    Values parse as JSON when possible (numbers, booleans, lists) and
    fall back to plain strings, so ``--set loss.q=0.2`` and
    ``--set dataset=runs/data`` both work.
    """
    out = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, text = item.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        parts = key.split(".")
        for part in parts[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override {key!r} descends into non-object {part!r}")
            node = nxt
        node[parts[-1]] = value
    return out
