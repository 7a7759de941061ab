"""Training loops for the point pipeline and the density baseline.

Both trainers share the same run layout: the resolved config is echoed
to ``config.json``, step records stream to ``log.jsonl``, checkpoints
land under ``checkpoints/`` with a JSON sidecar carrying the counters
needed to resume, and ``final_metrics.json`` holds the end-of-run
numbers. The metrics file deliberately excludes wall-clock timing so
two runs with the same config and seed produce byte-identical output;
timings live in the log stream instead.

Shuffling and augmentation draw from streams keyed by (seed, epoch)
and (seed, epoch, step), so resuming at an epoch boundary replays
exactly the schedule the uninterrupted run would have used.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_arrays, load_meta, save_arrays, save_meta
from .config import DensityConfig, RunConfig, run_config_to_dict
from .data import AnnotatedImage, Dataset, augment, image_to_tensor, read_dataset
from .density import DensityModel, PeakParams, bce_iou_loss, find_peaks, make_rdm
from .errors import ContractError, InfeasibleError, ValidationError
from .evaluation import MetricsReport, Prediction, evaluate_images, extract_predictions
from .losses import (
    LossBreakdown,
    classification_loss,
    detection_loss,
    regression_loss,
    total_loss,
)
from .matching import build_cost_matrix, solve_assignment
from .model import PointModel, build_anchor_grid, decode_proposals
from .optim import AdamW


@dataclass
class RunPaths:
    root: Path

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def log(self) -> Path:
        return self.root / "log.jsonl"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    @property
    def final_checkpoint(self) -> Path:
        return self.checkpoints / "final.ptck"

    @property
    def final_metrics(self) -> Path:
        return self.root / "final_metrics.json"


def _meta_path(ckpt: Path) -> Path:
    return ckpt.with_suffix(".meta.json")


def _augment_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, 0x617567, epoch, step]).generate_state(1)[0])


def _epoch_order(items: list, seed: int, epoch: int) -> list:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x73687566, epoch]))
    return [items[i] for i in rng.permutation(len(items))]


def _fill_missing_grads(model) -> None:
    # images with no ground truth leave some towers outside the graph
    for p in model.params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


class _LogWriter:
    def __init__(self, path: Path, append: bool):
        path.parent.mkdir(parents=True, exist_ok=True)
        self._f = open(path, "a" if append else "w")

    def write(self, record: dict) -> None:
        self._f.write(json.dumps(record, sort_keys=True) + "\n")
        self._f.flush()

    def close(self) -> None:
        self._f.close()


# ---------------------------------------------------------------------------
# point pipeline
# ---------------------------------------------------------------------------


def point_training_step(model: PointModel, item: AnnotatedImage, cfg: RunConfig) -> LossBreakdown:
    """Forward, match, and compute losses for one image; no update."""
    grid, heads = model.forward(image_to_tensor(item.pixels))
    graph = decode_proposals(grid, heads)
    gt = item.ground_truth()
    if grid.count < gt.count:
        raise InfeasibleError(
            f"image {item.id}: {grid.count} anchors cannot cover {gt.count} points"
        )
    costs = build_cost_matrix(graph.to_proposal_set(), gt, cfg.loss.alpha)
    matchres = solve_assignment(costs)
    reg = regression_loss(graph, gt, matchres, squared=cfg.loss.regression_squared)
    det = detection_loss(graph, matchres, cfg.loss.beta)
    cls = classification_loss(graph, gt, matchres, cfg.loss)
    return total_loss(reg, det, cls, cfg.loss)


def predict_points(model: PointModel, pixels: np.ndarray, threshold: float) -> list[Prediction]:
    with T.no_grad():
        grid, heads = model.forward(image_to_tensor(pixels))
        graph = decode_proposals(grid, heads)
    return extract_predictions(graph.to_proposal_set(), threshold)


def evaluate_point_model(
    model: PointModel, items: list[AnnotatedImage], cfg: RunConfig
) -> MetricsReport:
    per_image = [
        (predict_points(model, it.pixels, cfg.detection_threshold), it.ground_truth())
        for it in items
    ]
    return evaluate_images(
        per_image, cfg.eval_radius, cfg.backbone.num_classes, mode=cfg.match_mode
    )


def _check_anchor_budget(items: list[AnnotatedImage], cfg: RunConfig) -> None:
    for it in items:
        h, w, _ = it.pixels.shape
        out_h, out_w = cfg.augmentation.output_size or (h, w)
        m = build_anchor_grid(out_h, out_w, cfg.backbone).count
        if m < len(it.points):
            raise InfeasibleError(
                f"image {it.id}: {m} anchors cannot cover {len(it.points)} points"
            )


def _load_splits(cfg: RunConfig, dataset: Dataset | None) -> tuple[list, list]:
    if dataset is None:
        if not cfg.dataset:
            raise ValidationError("config.dataset is empty and no dataset was passed in")
        dataset = read_dataset(cfg.dataset)
    return dataset.split_items("train"), dataset.split_items("test")


def _resume_counters(model, opt: AdamW, resume: str | Path, kind: str) -> tuple[int, int]:
    arrays = load_arrays(resume)
    meta = load_meta(_meta_path(Path(resume)))
    if meta.get("kind") != kind:
        raise ValidationError(
            f"checkpoint kind {meta.get('kind')!r} cannot resume a {kind!r} run"
        )
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    opt.load_state_arrays(arrays, int(meta["step"]))
    return int(meta["epoch"]), int(meta["step"])


def _save_checkpoint(path: Path, model, opt: AdamW, meta: dict) -> None:
    arrays = dict(model.state_arrays())
    arrays.update(opt.state_arrays())
    save_arrays(path, arrays)
    save_meta(_meta_path(path), meta)


def _train_common(
    cfg: RunConfig, dataset, resume, kind: str, model, step_fn, eval_fn, epoch_eval_fn=None
) -> dict:
    """Shared epoch loop; step_fn returns the scalar loss record."""
    if not cfg.out_dir:
        raise ValidationError("config.out_dir is empty")
    train_items, test_items = _load_splits(cfg, dataset)
    if not train_items:
        raise ValidationError("training split is empty")
    _check_anchor_budget(train_items, cfg)

    paths = RunPaths(Path(cfg.out_dir))
    paths.root.mkdir(parents=True, exist_ok=True)
    paths.checkpoints.mkdir(parents=True, exist_ok=True)
    _write_json(paths.config, run_config_to_dict(cfg))

    opt = AdamW(
        model.params,
        lr=cfg.optimizer.lr,
        betas=(cfg.optimizer.beta1, cfg.optimizer.beta2),
        eps=cfg.optimizer.eps,
        weight_decay=cfg.optimizer.weight_decay,
    )
    start_epoch, global_step = 0, 0
    if resume is not None:
        start_epoch, global_step = _resume_counters(model, opt, resume, kind)

    log = _LogWriter(paths.log, append=resume is not None)
    last_epoch_mean: dict[str, float] = {}
    try:
        for epoch in range(start_epoch, cfg.epochs):
            sums: dict[str, float] = {}
            t0 = time.perf_counter()
            order = _epoch_order(train_items, cfg.seed, epoch)
            for idx, item in enumerate(order):
                aug = augment(item, cfg.augmentation, _augment_seed(cfg.seed, epoch, idx))
                opt.zero_grad()
                record = step_fn(aug)
                _fill_missing_grads(model)
                opt.step()
                global_step += 1
                for k, v in record.items():
                    sums[k] = sums.get(k, 0.0) + v
                if cfg.log_every and global_step % cfg.log_every == 0:
                    log.write(
                        {
                            "event": "step",
                            "epoch": epoch,
                            "step": global_step,
                            "image": item.id,
                            **record,
                        }
                    )
            n = len(order)
            last_epoch_mean = {k: v / n for k, v in sums.items()}
            log.write(
                {
                    "event": "epoch",
                    "epoch": epoch,
                    "step": global_step,
                    "seconds": time.perf_counter() - t0,
                    **last_epoch_mean,
                }
            )
            done = epoch + 1
            if epoch_eval_fn and test_items and cfg.eval_every and done % cfg.eval_every == 0:
                log.write(
                    {"event": "eval", "epoch": epoch, "step": global_step, **epoch_eval_fn(test_items)}
                )
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.epochs:
                ck = paths.checkpoints / f"epoch_{done:03d}.ptck"
                _save_checkpoint(ck, model, opt, _ckpt_meta(cfg, kind, done, global_step))
    finally:
        log.close()

    _save_checkpoint(
        paths.final_checkpoint, model, opt, _ckpt_meta(cfg, kind, cfg.epochs, global_step)
    )
    metrics = {
        "kind": kind,
        "epochs": cfg.epochs,
        "steps": global_step,
        "train_loss": last_epoch_mean,
        **eval_fn(test_items),
    }
    _write_json(paths.final_metrics, metrics)
    return metrics


def _ckpt_meta(cfg: RunConfig, kind: str, epoch: int, step: int) -> dict:
    return {
        "kind": kind,
        "epoch": epoch,
        "step": step,
        "config": run_config_to_dict(cfg),
    }


def train_point_model(
    cfg: RunConfig, dataset: Dataset | None = None, resume: str | Path | None = None
) -> dict:
    model = PointModel(cfg.backbone, seed=cfg.seed)

    def step(item: AnnotatedImage) -> dict:
        breakdown = point_training_step(model, item, cfg)
        breakdown.total.backward()
        return breakdown.scalars()

    def final_eval(test_items: list[AnnotatedImage]) -> dict:
        if not test_items:
            return {"eval": None}
        return {"eval": evaluate_point_model(model, test_items, cfg).to_dict()}

    def epoch_eval(test_items: list[AnnotatedImage]) -> dict:
        report = evaluate_point_model(model, test_items, cfg)
        return {
            "detection_f1": report.detection["f1"],
            "classification_f1": report.classification_macro["f1"],
        }

    return _train_common(cfg, dataset, resume, "point", model, step, final_eval, epoch_eval)


# ---------------------------------------------------------------------------
# density baseline
# ---------------------------------------------------------------------------


def density_target(item: AnnotatedImage, dc: DensityConfig) -> np.ndarray:
    h, w, _ = item.pixels.shape
    return make_rdm(item.ground_truth(), h, w, kernel_size=dc.kernel_size, sigma=dc.sigma)


def predict_density_points(
    model: DensityModel, pixels: np.ndarray, params: PeakParams
) -> list[Prediction]:
    dens = model.predict_map(image_to_tensor(pixels))
    return [Prediction(x=x, y=y, score=v, class_id=0) for x, y, v in find_peaks(dens, params)]


def evaluate_density_model(
    model: DensityModel, items: list[AnnotatedImage], cfg: RunConfig, params: PeakParams | None = None
) -> MetricsReport:
    params = params or PeakParams(cfg.density.min_distance, cfg.density.abs_threshold)
    per_image = [
        (predict_density_points(model, it.pixels, params), it.ground_truth()) for it in items
    ]
    return evaluate_images(
        per_image, cfg.eval_radius, cfg.backbone.num_classes, mode=cfg.match_mode
    )


def train_density_model(
    cfg: RunConfig, dataset: Dataset | None = None, resume: str | Path | None = None
) -> dict:
    model = DensityModel(cfg.backbone, seed=cfg.seed)
    dc = cfg.density

    def step(item: AnnotatedImage) -> dict:
        h, w, _ = item.pixels.shape
        pred = model.forward(image_to_tensor(item.pixels))
        target = density_target(item, dc).reshape(1, 1, h, w)
        loss = bce_iou_loss(pred, target, w_bce=dc.w_bce, w_iou=dc.w_iou)
        loss.backward()
        return {"total": loss.item()}

    def final_eval(test_items: list[AnnotatedImage]) -> dict:
        if not test_items:
            return {"eval": None}
        report = evaluate_density_model(model, test_items, cfg)
        return {"eval": {"detection": report.detection}}

    def epoch_eval(test_items: list[AnnotatedImage]) -> dict:
        report = evaluate_density_model(model, test_items, cfg)
        return {"detection_f1": report.detection["f1"]}

    return _train_common(cfg, dataset, resume, "density", model, step, final_eval, epoch_eval)


# ---------------------------------------------------------------------------
# loading trained models back
# ---------------------------------------------------------------------------


def load_checkpointed_model(checkpoint: str | Path) -> tuple[PointModel, dict]:
    """Rebuild a model from a checkpoint and its sidecar metadata."""
    from .config import parse_run_config

    arrays = load_arrays(checkpoint)
    meta = load_meta(_meta_path(Path(checkpoint)))
    cfg = parse_run_config(meta["config"])
    kind = meta.get("kind")
    if kind == "point":
        model: PointModel = PointModel(cfg.backbone, seed=cfg.seed)
    elif kind == "density":
        model = DensityModel(cfg.backbone, seed=cfg.seed)
    else:
        raise ValidationError(f"unknown checkpoint kind {kind!r}")
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model, meta
