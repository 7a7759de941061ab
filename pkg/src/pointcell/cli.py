"""Command-line interface.

Subcommands: generate, train, eval, infer, sweep-q, baseline-train,
baseline-sweep, render. Every command exits 0 on success; failures
print a single JSON object {"error": <class>, "message": <text>} to
stderr and exit nonzero, so callers can parse outcomes without
scraping tracebacks.

Commands that take a run config accept ``--config file.json`` plus any
number of ``--set key.path=value`` overrides; the fully resolved
config is echoed into the run directory, and a run is reproducible
from that echo alone.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .config import (
    RunConfig,
    apply_overrides,
    generator_config_to_dict,
    load_config_file,
    parse_generator_config,
    parse_run_config,
    run_config_to_dict,
)
from .data import generate_dataset, read_dataset, write_dataset
from .density import DensityModel, PeakParams
from .errors import PointcellError, ValidationError
from .evaluation import time_inference
from .train import (
    evaluate_density_model,
    evaluate_point_model,
    load_checkpointed_model,
    predict_density_points,
    predict_points,
    train_density_model,
    train_point_model,
)
from .viz import line_plot, render_overlay, save_png, write_csv


def _print(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _load_raw(args) -> dict:
    raw = load_config_file(args.config) if args.config else {}
    return apply_overrides(raw, args.set or [])


def _run_config(args) -> RunConfig:
    return parse_run_config(_load_raw(args))


def _read_image(path: str) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise ValidationError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float64) / 255.0


def _read_points_file(path: str) -> list[tuple[float, float, int]]:
    try:
        payload = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read points file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"points file {path} is not valid JSON: {exc}") from exc
    pts = payload.get("points") if isinstance(payload, dict) else None
    if pts is None:
        raise ValidationError(f"points file {path} has no 'points' list")
    out = []
    for i, p in enumerate(pts):
        try:
            out.append((float(p["x"]), float(p["y"]), int(p.get("class", 0))))
        except (TypeError, KeyError, ValueError) as exc:
            raise ValidationError(f"points file {path}, entry {i}: {exc}") from exc
    return out


def _floats_arg(text: str, name: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ValidationError(f"--{name}: {exc}") from exc
    if not vals:
        raise ValidationError(f"--{name}: empty list")
    return vals


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    gen_cfg, count = parse_generator_config(_load_raw(args))
    dataset = generate_dataset(gen_cfg, count)
    out = Path(args.out)
    write_dataset(dataset, out)
    echo = generator_config_to_dict(gen_cfg, count)
    (out / "generator_config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    _print(
        {
            "dataset": str(out),
            "images": count,
            "train": len(dataset.splits["train"]),
            "test": len(dataset.splits["test"]),
        }
    )
    return 0


def cmd_train(args) -> int:
    metrics = train_point_model(_run_config(args), resume=args.resume)
    _print(metrics)
    return 0


def cmd_baseline_train(args) -> int:
    metrics = train_density_model(_run_config(args), resume=args.resume)
    _print(metrics)
    return 0


def _eval_config(args, meta: dict) -> RunConfig:
    raw = meta["config"]
    if args.dataset:
        raw = {**raw, "dataset": args.dataset}
    raw = apply_overrides(raw, args.set or [])
    return parse_run_config(raw)


def cmd_eval(args) -> int:
    model, meta = load_checkpointed_model(args.checkpoint)
    cfg = _eval_config(args, meta)
    if not cfg.dataset:
        raise ValidationError("no dataset: pass --dataset or use a config with one")
    items = read_dataset(cfg.dataset).split_items(args.split)
    if not items:
        raise ValidationError(f"split '{args.split}' is empty")
    if isinstance(model, DensityModel):
        report = evaluate_density_model(model, items, cfg)
        params = PeakParams(cfg.density.min_distance, cfg.density.abs_threshold)
        infer = lambda px: predict_density_points(model, px, params)  # noqa: E731
    else:
        report = evaluate_point_model(model, items, cfg)
        infer = lambda px: predict_points(model, px, cfg.detection_threshold)  # noqa: E731
    payload = {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "num_images": len(items),
        "radius": cfg.eval_radius,
        "threshold": cfg.detection_threshold,
        "metrics": report.to_dict(),
    }
    if not args.no_timing:
        payload["seconds_per_image"] = time_inference(infer, [it.pixels for it in items])
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _print(payload)
    return 0


def cmd_infer(args) -> int:
    model, meta = load_checkpointed_model(args.checkpoint)
    raw = apply_overrides(meta["config"], args.set or [])
    cfg = parse_run_config(raw)
    pixels = _read_image(args.image)
    h, w, _ = pixels.shape
    stride = cfg.backbone.head_stride
    if h % stride or w % stride:
        from .data import pad_to_stride

        pixels = pad_to_stride(pixels, stride)
    if isinstance(model, DensityModel):
        preds = predict_density_points(
            model, pixels, PeakParams(cfg.density.min_distance, cfg.density.abs_threshold)
        )
    else:
        preds = predict_points(model, pixels, cfg.detection_threshold)
    payload = {
        "image": str(args.image),
        "points": [
            {"x": p.x, "y": p.y, "score": p.score, "class": p.class_id} for p in preds
        ],
    }
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    _print(payload)
    return 0


def cmd_sweep_q(args) -> int:
    base_raw = _load_raw(args)
    base = parse_run_config(base_raw)
    if not base.out_dir:
        raise ValidationError("config.out_dir is empty")
    qs = _floats_arg(args.q, "q")
    rows = []
    for q in qs:
        raw = apply_overrides(base_raw, [f"loss.q={q!r}", f"out_dir={Path(base.out_dir) / f'q_{q:g}'}"])
        metrics = train_point_model(parse_run_config(raw))
        ev = metrics["eval"]
        if ev is None:
            raise ValidationError("sweep dataset has no test split to score")
        rows.append([q, ev["detection"]["f1"], ev["classification_macro"]["f1"]])
    out_csv = Path(args.out_csv or Path(base.out_dir) / "sweep_q.csv")
    write_csv(out_csv, ["q", "detection_f1", "classification_f1"], rows)
    plot = args.plot or str(Path(base.out_dir) / "sweep_q.png")
    line_plot(
        plot,
        [r[0] for r in rows],
        {"detection_f1": [r[1] for r in rows], "classification_f1": [r[2] for r in rows]},
        "q",
        "F1",
    )
    _print({"csv": str(out_csv), "plot": str(plot), "rows": rows})
    return 0


def cmd_baseline_sweep(args) -> int:
    model, meta = load_checkpointed_model(args.checkpoint)
    if not isinstance(model, DensityModel):
        raise ValidationError("--checkpoint must name a density baseline checkpoint")
    cfg = _eval_config(args, meta)
    if not cfg.dataset:
        raise ValidationError("no dataset: pass --dataset or use a config with one")
    items = read_dataset(cfg.dataset).split_items(args.split)
    if not items:
        raise ValidationError(f"split '{args.split}' is empty")
    mds = [int(v) for v in _floats_arg(args.min_distance, "min-distance")]
    rows = []
    for md in mds:
        report = evaluate_density_model(
            model, items, cfg, PeakParams(md, cfg.density.abs_threshold)
        )
        d = report.detection
        rows.append(["density", md, d["precision"], d["recall"], d["f1"]])
    if args.point_checkpoint:
        pmodel, pmeta = load_checkpointed_model(args.point_checkpoint)
        if isinstance(pmodel, DensityModel):
            raise ValidationError("--point-checkpoint must name a point-pipeline checkpoint")
        pcfg = _eval_config(args, pmeta)
        d = evaluate_point_model(pmodel, items, pcfg).detection
        # the point pipeline has no suppression distance: column left empty
        rows.append(["point", "", d["precision"], d["recall"], d["f1"]])
    out_csv = Path(args.out_csv)
    write_csv(out_csv, ["method", "min_distance", "precision", "recall", "f1"], rows)
    if args.plot:
        dens = [r for r in rows if r[0] == "density"]
        series = {"density_f1": [r[4] for r in dens]}
        point = [r for r in rows if r[0] == "point"]
        if point:
            series["point_f1"] = [point[0][4]] * len(dens)
        line_plot(args.plot, [r[1] for r in dens], series, "min_distance", "detection F1")
    _print({"csv": str(out_csv), "rows": rows})
    return 0


def cmd_render(args) -> int:
    pixels = _read_image(args.image)
    points = _read_points_file(args.points)
    gt = _read_points_file(args.gt) if args.gt else None
    out = render_overlay(pixels, points, gt_points=gt, dot_radius=args.dot_radius)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_png(out, args.out)
    _print({"out": str(args.out), "points": len(points)})
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override a config entry by dotted path (repeatable)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pointcell", description="Point-annotated cell recognition toolkit"
    )
    parser.add_argument("--version", action="version", version=f"pointcell {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesize a point-annotated dataset")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the point pipeline")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline-train", help="train the density baseline")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_baseline_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", help="dataset directory (defaults to the checkpoint's)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out", help="write the report JSON here as well")
    p.add_argument(
        "--no-timing",
        action="store_true",
        help="omit wall-clock timing for byte-stable output",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict points for one image")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", help="write predictions JSON here as well")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("sweep-q", help="train once per q and tabulate F1")
    _add_config_flags(p)
    p.add_argument("--q", required=True, help="comma-separated q values, e.g. 0.1,0.4,0.9")
    p.add_argument("--out-csv", help="CSV path (default <out_dir>/sweep_q.csv)")
    p.add_argument("--plot", help="plot path (default <out_dir>/sweep_q.png)")
    p.set_defaults(func=cmd_sweep_q)

    p = sub.add_parser("baseline-sweep", help="evaluate a density checkpoint over min_distance")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True, help="density baseline checkpoint")
    p.add_argument("--min-distance", required=True, help="comma-separated values, e.g. 3,6,12,24")
    p.add_argument("--point-checkpoint", help="add a contrast row from a point-pipeline checkpoint")
    p.add_argument("--dataset", help="dataset directory (defaults to the checkpoint's)")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--out-csv", required=True)
    p.add_argument("--plot", help="optional plot path")
    p.set_defaults(func=cmd_baseline_sweep)

    p = sub.add_parser("render", help="draw predicted points over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--points", required=True, help="JSON file with a 'points' list")
    p.add_argument("--gt", help="optional second points file drawn as rings")
    p.add_argument("--out", required=True)
    p.add_argument("--dot-radius", type=float, default=2.5)
    p.set_defaults(func=cmd_render)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PointcellError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - safety net for unexpected failures
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
