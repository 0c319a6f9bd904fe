"""Command-line entry point.

Subcommands: make-synthetic, train-lum, train-color, render, eval.
Configuration is a flat JSON object; command-line flags override file
values, and unknown keys are rejected.  Every error class exits with its
own code so scripts can tell them apart:

    2  configuration or scene-spec problem
    3  dataset or file I/O problem
    4  missing or unreadable checkpoint
    5  stage-order violation (e.g. train-color before train-lum)
    6  colorizer unavailable
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np
from PIL import Image

from .color import AbBinTable, build_ab_bin_table, load_bin_table, save_bin_table
from .colorize import ColorizeError
from .field import FieldParams, init_field, load_field, save_field
from .metrics import evaluate, write_report
from .rendering import render_image, write_planes
from .scenes import DatasetError, SyntheticScene, generate_views, load_dataset, save_dataset
from .training import TrainConfig, train_color, train_luminance

EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_CHECKPOINT = 4
EXIT_STAGE_ORDER = 5
EXIT_COLORIZER = 6


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# Flat config keys beyond TrainConfig: synthesis and field geometry.
EXTRA_KEYS = {
    "n_views": 16,
    "image_size": 64,
    "focal": None,
    "orbit_radius": None,
    "orbit_elevation_deg": 25.0,
    "samples_per_ray": 256,
    "resolution": 32,
    "bin_table": "",  # path to a pinned ab bin table; empty = build default
    "checkpoint_every": 0,  # epochs between periodic checkpoints; 0 = off
    "workers": 0,  # 0 = use available parallelism
}

_TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}


def default_config() -> dict:
    cfg = {f.name: f.default for f in fields(TrainConfig)}
    cfg.update(EXTRA_KEYS)
    return cfg


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = default_config()
    if path:
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}", EXIT_CONFIG)
        if not isinstance(data, dict):
            raise CliError(f"{path}: config must be a JSON object", EXIT_CONFIG)
        unknown = set(data) - set(cfg)
        if unknown:
            raise CliError(
                f"{path}: unknown config keys {sorted(unknown)}", EXIT_CONFIG
            )
        cfg.update(data)
    for key, value in overrides.items():
        if value is not None:
            cfg[key] = value
    return cfg


def train_config_from(cfg: dict) -> TrainConfig:
    kwargs = {k: cfg[k] for k in _TRAIN_KEYS}
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise CliError(f"bad training config: {exc}", EXIT_CONFIG)


def resolve_workers(cfg: dict) -> int:
    w = int(cfg.get("workers") or 0)
    return w if w > 0 else (os.cpu_count() or 1)


def load_table_for(cfg: dict) -> AbBinTable:
    if cfg.get("bin_table"):
        try:
            return load_bin_table(cfg["bin_table"])
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot load bin table: {exc}", EXIT_CONFIG)
    return build_ab_bin_table()


def save_checkpoint(params: FieldParams, path: Path, stage: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    save_field(params, path)
    save_bin_table(params.table, str(path) + ".abtable.txt")
    with open(str(path) + ".meta.json", "w") as fh:
        json.dump({"stage": stage}, fh)


def load_checkpoint(path: str, require_stage: str | None = None) -> FieldParams:
    p = Path(path)
    if not p.exists():
        raise CliError(f"checkpoint not found: {path}", EXIT_CHECKPOINT)
    meta_path = Path(str(p) + ".meta.json")
    table_path = Path(str(p) + ".abtable.txt")
    if not table_path.exists():
        raise CliError(f"checkpoint table missing: {table_path}", EXIT_CHECKPOINT)
    try:
        table = load_bin_table(table_path)
        params = load_field(p, table)
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot load checkpoint: {exc}", EXIT_CHECKPOINT)
    stage = None
    if meta_path.exists():
        with open(meta_path) as fh:
            stage = json.load(fh).get("stage")
    if require_stage and stage not in (require_stage, "color"):
        raise CliError(
            f"{path} is not a {require_stage!r}-stage checkpoint (found {stage!r}); "
            "run the earlier stage first",
            EXIT_STAGE_ORDER,
        )
    return params


def cmd_make_synthetic(args) -> int:
    cfg = load_config(args.config, {"n_views": args.views, "seed": args.seed})
    if int(cfg["n_views"]) < 2:
        raise CliError("n_views must be >= 2 (training needs two views)", EXIT_CONFIG)
    try:
        scene = SyntheticScene.from_json(args.scene)
    except (OSError, DatasetError, ValueError) as exc:
        raise CliError(f"bad scene spec: {exc}", EXIT_CONFIG)
    dataset = generate_views(
        scene,
        int(cfg["n_views"]),
        image_size=int(cfg["image_size"]),
        focal=cfg["focal"],
        orbit_radius=cfg["orbit_radius"],
        orbit_elevation_deg=float(cfg["orbit_elevation_deg"]),
        samples_per_ray=int(cfg["samples_per_ray"]),
    )
    try:
        save_dataset(dataset, args.out)
    except (OSError, DatasetError) as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_DATASET)
    print(f"wrote {len(dataset)} views to {args.out}")
    return 0


def _load_dataset_or_die(path: str):
    try:
        return load_dataset(path)
    except (OSError, DatasetError) as exc:
        raise CliError(f"cannot load dataset: {exc}", EXIT_DATASET)


def _open_log(out_dir: Path, name: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    fh = open(out_dir / name, "w")
    return fh, (lambda line: print(line, file=fh))


def _epoch_hook(out_dir: Path, base_name: str, every: int, stage: str):
    if every <= 0:
        return lambda epoch, params, mean_loss: None

    def hook(epoch, params, mean_loss):
        if (epoch + 1) % every == 0:
            save_checkpoint(params, out_dir / f"{base_name}_epoch{epoch:03d}.cnrf", stage)

    return hook


def cmd_train_lum(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers})
    dataset = _load_dataset_or_die(args.dataset)
    table = load_table_for(cfg)
    tc = train_config_from(cfg)
    res = int(cfg["resolution"])
    params = init_field(dataset.bbox_min, dataset.bbox_max, (res, res, res), table)
    out = Path(args.out)
    log_fh, log_fn = _open_log(out, "train_lum_log.csv")
    try:
        train_luminance(
            dataset, tc, params, log_fn=log_fn,
            on_epoch_end=_epoch_hook(out, "field_lum", int(cfg["checkpoint_every"]), "luminance"),
        )
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATASET)
    finally:
        log_fh.close()
    save_checkpoint(params, out / "field_lum.cnrf", "luminance")
    print(f"wrote {out / 'field_lum.cnrf'}")
    return 0


def cmd_train_color(args) -> int:
    overrides = {
        "seed": args.seed,
        "workers": args.workers,
        "colorizer": args.colorizer,
        "external_cmd": args.external_cmd,
    }
    cfg = load_config(args.config, overrides)
    dataset = _load_dataset_or_die(args.dataset)
    params = load_checkpoint(args.checkpoint, require_stage="luminance")
    tc = train_config_from(cfg)
    out = Path(args.out)
    log_fh, log_fn = _open_log(out, "train_color_log.csv")
    try:
        train_color(
            params, dataset, tc, log_fn=log_fn,
            on_epoch_end=_epoch_hook(out, "field_color", int(cfg["checkpoint_every"]), "color"),
        )
    except ColorizeError as exc:
        raise CliError(f"colorizer unavailable: {exc}", EXIT_COLORIZER)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_DATASET)
    finally:
        log_fh.close()
    save_checkpoint(params, out / "field_color.cnrf", "color")
    print(f"wrote {out / 'field_color.cnrf'}")
    return 0


def _parse_view_list(text: str, n: int) -> list[int]:
    if text == "all":
        return list(range(n))
    try:
        ids = [int(tok) for tok in text.split(",") if tok]
    except ValueError:
        raise CliError(f"bad view list {text!r}", EXIT_CONFIG)
    bad = [i for i in ids if not 0 <= i < n]
    if bad:
        raise CliError(f"views {bad} out of range (dataset has {n})", EXIT_DATASET)
    return ids


def cmd_render(args) -> int:
    cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers})
    dataset = _load_dataset_or_die(args.dataset)
    params = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    workers = resolve_workers(cfg)
    ids = _parse_view_list(args.views, len(dataset.views))
    for i in ids:
        cam = dataset.views[i].camera
        lum, ab, rgb = render_image(
            params, cam,
            m_coarse=int(cfg["m_coarse"]), m_fine=int(cfg["m_fine"]),
            seed=int(cfg["seed"]), workers=workers,
        )
        img = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img).save(out / f"render_{i:03d}.png")
        write_planes(out / f"render_{i:03d}", lum, ab)
    print(f"rendered {len(ids)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    dataset = _load_dataset_or_die(args.dataset)
    pred_dir = Path(args.pred)
    preds, gts = [], []
    for i, view in enumerate(dataset.views):
        png = pred_dir / f"render_{i:03d}.png"
        if not png.exists():
            continue
        preds.append(np.asarray(Image.open(png), dtype=np.float64)[..., :3] / 255.0)
        gts.append(view.rgb)
    if not preds:
        raise CliError(f"no render_*.png in {pred_dir} match the dataset", EXIT_DATASET)
    reports, mean = evaluate(preds, gts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(reports, mean, out / "report.tsv", out / "report.json")
    print(
        f"views={len(reports)} psnr={mean.psnr:.2f} ssim={mean.ssim:.4f} "
        f"colorful={mean.colorful_pred:.2f} delta_colorful={mean.delta_colorful:.2f}"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chromafield",
        description="Train and render colorized radiance fields from monochrome views.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (flat keys)")
        p.add_argument("--seed", type=int, default=None, help="rng seed")
        p.add_argument("--workers", type=int, default=None,
                       help="worker threads (0 = available parallelism)")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("make-synthetic", help="generate an orbit dataset from a scene spec")
    p.add_argument("--scene", required=True, help="scene spec JSON")
    p.add_argument("--views", type=int, default=None, help="number of views")
    common(p)
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train-lum", help="stage 1: fit density and luminance")
    p.add_argument("--dataset", required=True)
    common(p)
    p.set_defaults(func=cmd_train_lum)

    p = sub.add_parser("train-color", help="stage 2: train color logits")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True, help="stage-1 checkpoint")
    p.add_argument("--colorizer", choices=["oracle", "palette", "external"], default=None)
    p.add_argument("--external-cmd", dest="external_cmd", default=None,
                   help="command line for the external colorizer subprocess")
    common(p)
    p.set_defaults(func=cmd_train_color)

    p = sub.add_parser("render", help="render dataset cameras from a checkpoint")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--views", default="all", help='comma-separated ids or "all"')
    common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="compare renders against dataset ground truth")
    p.add_argument("--dataset", required=True)
    p.add_argument("--pred", required=True, help="directory with render_*.png")
    common(p)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
