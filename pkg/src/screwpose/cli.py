"""Command line interface: one subcommand per pipeline stage.

All commands take --config <json> plus repeatable --set key.path=value
overrides and an optional --seed that replaces the master seed. Exit codes:
0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import (
    ConfigError,
    anatomy_specs_from,
    apply_overrides,
    augment_from,
    geometry_from,
    load_config,
    network_config_from,
    patch_spec_from,
    screw_from,
)

log = logging.getLogger(__name__)

_COMMANDS = ("phantom", "render", "dataset", "annotate", "train", "eval",
             "sweep-noise", "sweep-size", "qq", "serve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="screwpose",
        description="Synthetic radiograph lab for instrument pose estimation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file (defaults apply when omitted)")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one config field")
        p.add_argument("--seed", type=int, default=None,
                       help="override the master seed")
        if name == "serve":
            p.add_argument("--port", type=int, default=None)
        if name == "eval":
            p.add_argument("--checkpoint", type=str, default=None)
        if name == "qq":
            p.add_argument("--input", type=str, required=False,
                           help="errors.csv to analyze")
            p.add_argument("--column", type=str,
                           default="position_error_mm")
    return parser


def _resolve_config(args) -> dict:
    cfg = load_config(args.config)
    cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg["master_seed"] = int(args.seed)
    return cfg


def cmd_phantom(cfg: dict, args) -> int:
    from .phantom import generate_anatomy
    out = Path(cfg["dataset"]["out_dir"]).parent / "volumes"
    for spec in anatomy_specs_from(cfg):
        vol = generate_anatomy(spec)
        vol.save(out / f"anatomy_{spec.seed}")
        print(f"wrote {out}/anatomy_{spec.seed}.json/.raw "
              f"({vol.dims[0]}x{vol.dims[1]}x{vol.dims[2]})")
    return 0


def cmd_render(cfg: dict, args) -> int:
    from .experiments import reference_poses
    from .phantom import generate_anatomy
    from .renderer import render, save_png16, window_to_8bit
    from PIL import Image

    g = geometry_from(cfg)
    screw = screw_from(cfg)
    spec = anatomy_specs_from(cfg)[0]
    d = cfg["dataset"]
    wp = reference_poses(spec, g, 1, int(cfg["master_seed"]),
                         float(d["surface_scale"]),
                         float(d["reference_tilt_max_deg"]))[0]
    vol = generate_anatomy(spec)
    img = render(vol, screw, wp, g, float(d["step_mm"]))
    out = Path(d["out_dir"]).parent / "render"
    out.mkdir(parents=True, exist_ok=True)
    hi = float(img.pixels.max())
    save_png16(out / "sample16.png", img.pixels, 0.0, hi)
    Image.fromarray(window_to_8bit(img.pixels, 0.0, hi)).save(
        out / "sample8.png")
    (out / "sample_meta.json").write_text(
        json.dumps(img.meta.to_json(), sort_keys=True, indent=1))
    print(f"wrote {out}/sample16.png, sample8.png, sample_meta.json")
    return 0


def cmd_dataset(cfg: dict, args) -> int:
    from .experiments import generate_dataset
    ds = generate_dataset(cfg)
    counts = {k: len(v) for k, v in ds.splits.items()}
    print(f"dataset at {ds.root}: {counts}, window hi {ds.hi:.4g}")
    return 0


def cmd_annotate(cfg: dict, args) -> int:
    from .experiments import Dataset, _annotate_split
    ds = Dataset.load(cfg["dataset"]["out_dir"])
    split = cfg["noise"]["split"]
    eta = float(cfg["noise"]["eta"])
    k = int(cfg["noise"]["annotations_per_image"])
    ann_dir = Path(cfg["experiment"]["out_dir"]) / "annotations"
    _annotate_split(ds, cfg, split, eta, k, ann_dir)
    print(f"wrote {ann_dir}/eta{eta:g}/{split}.k{k}.json")
    return 0


def cmd_train(cfg: dict, args) -> int:
    from .experiments import Dataset, _annotate_split, _train_condition
    ds = Dataset.load(cfg["dataset"]["out_dir"])
    eta = float(cfg["noise"]["eta"])
    k = int(cfg["noise"]["annotations_per_image"])
    ann_dir = Path(cfg["experiment"]["out_dir"]) / "annotations"
    ann_train = _annotate_split(ds, cfg, "train", eta, k, ann_dir)
    ann_val = _annotate_split(ds, cfg, "validation", eta, 1, ann_dir)
    label = f"train_eta{eta:g}_k{k}"
    models_dir = Path(cfg["experiment"]["out_dir"]) / "models"
    result = _train_condition(ds, cfg, label, ds.splits["train"],
                              ann_train, ann_val, models_dir=models_dir)
    print(f"best validation MSE {result.checkpoint.val_error:.6f} "
          f"at epoch {result.checkpoint.epoch}; "
          f"saved {models_dir}/{label}.ckpt")
    return 0


def cmd_eval(cfg: dict, args) -> int:
    from .experiments import (Dataset, _condition_package, evaluate_model,
                              write_errors_csv, write_summary_csv)
    from .regressor import ModelCheckpoint
    if not args.checkpoint:
        print("error: eval requires --checkpoint", file=sys.stderr)
        return 1
    ds = Dataset.load(cfg["dataset"]["out_dir"])
    model = ModelCheckpoint.load(args.checkpoint).to_model()
    rows = evaluate_model(ds, model, cfg)
    cond = _condition_package(Path(args.checkpoint).stem, 0.0, rows)
    out = Path(cfg["experiment"]["out_dir"]) / "results" / "eval"
    write_errors_csv(out / "errors.csv", [cond], "value")
    write_summary_csv(out / "summary.csv", [cond], "value")
    print(f"median position error {cond.summary_position['median']:.4f} mm; "
          f"wrote {out}/errors.csv")
    return 0


def cmd_sweep_noise(cfg: dict, args) -> int:
    from .experiments import run_noise_sweep
    result = run_noise_sweep(cfg)
    for cond in result.conditions:
        print(f"{cond.label}: median position error "
              f"{cond.summary_position['median']:.4f} mm")
    for fit in result.fits:
        print(f"fit {fit['metric']}: slope {fit['slope']:.4f}, "
              f"R^2 {fit['r_squared']:.4f}")
    print(f"results in {result.out_dir}")
    return 0


def cmd_sweep_size(cfg: dict, args) -> int:
    from .experiments import run_size_sweep
    result = run_size_sweep(cfg)
    for cond in result.conditions:
        print(f"{cond.label}: median position error "
              f"{cond.summary_position['median']:.4f} mm")
    print(f"results in {result.out_dir}")
    return 0


def cmd_qq(cfg: dict, args) -> int:
    import csv as _csv
    from .stats import qq_normal
    if not args.input:
        print("error: qq requires --input errors.csv", file=sys.stderr)
        return 1
    with open(args.input, newline="") as f:
        reader = _csv.DictReader(f)
        if args.column not in (reader.fieldnames or []):
            print(f"error: column {args.column} not in {args.input}",
                  file=sys.stderr)
            return 1
        values = [float(row[args.column]) for row in reader]
    qq = qq_normal(np.array(values))
    out = Path(cfg["experiment"]["out_dir"]) / "results" / "qq"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "qq_pairs.csv", "w", newline="") as f:
        w = _csv.writer(f, lineterminator="\n")
        w.writerow(["theoretical_quantile", "empirical_quantile"])
        for t, e in zip(qq.theoretical, qq.empirical):
            w.writerow([repr(float(t)), repr(float(e))])
    with open(out / "qq_fit.csv", "w", newline="") as f:
        w = _csv.writer(f, lineterminator="\n")
        w.writerow(["slope", "intercept", "r_squared",
                    "frac_within_1sigma", "frac_within_1_5sigma"])
        w.writerow([repr(qq.slope), repr(qq.intercept), repr(qq.r_squared),
                    repr(qq.frac_within_1sigma), repr(qq.frac_within_1_5sigma)])
    print(f"slope {qq.slope:.4f}, intercept {qq.intercept:.4f}, "
          f"R^2 {qq.r_squared:.5f}; wrote {out}/qq_pairs.csv")
    return 0


def cmd_serve(cfg: dict, args) -> int:
    import uvicorn
    from .service import create_app
    port = args.port if args.port is not None else int(cfg["serve"]["port"])
    app = create_app(cfg)
    uvicorn.run(app, host="127.0.0.1", port=port, log_level="info")
    return 0


_HANDLERS = {
    "phantom": cmd_phantom,
    "render": cmd_render,
    "dataset": cmd_dataset,
    "annotate": cmd_annotate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep-noise": cmd_sweep_noise,
    "sweep-size": cmd_sweep_size,
    "qq": cmd_qq,
    "serve": cmd_serve,
}


def cli(argv) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage problems and 0 on --help
        return 0 if exc.code in (0, None) else 1
    try:
        cfg = _resolve_config(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return _HANDLERS[args.command](cfg, args)
    except (ConfigError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures map to exit 2
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))
