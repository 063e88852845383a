"""Operator entry point. Thin orchestration only: every command defers to
library calls, and exit codes are a stable contract (0 ok, 2 config,
3 data, 4 numerical)."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .autodiff import Variable
from .checkpoint import expect_meta, load_checkpoint
from .data import (build_index, from_uint8, load_record, read_png, to_uint8,
                   write_png)
from .degradation import perturb_flow
from .errors import (CheckpointError, ConfigError, DataError, FlowSRError,
                     NumericalError, ShapeError)
from .metrics import build_report, psnr_y, ssim_y, write_report_json, write_report_tsv
from .srnet import dump_condition_features
from .trainer import (TrainConfig, load_sr_generator, load_stage1_generator,
                      run_stage1, run_stage2)

_TRAIN_FIELDS = {f.name for f in dataclass_fields(TrainConfig)}
_EXTRA_KEYS = {"hr_dir", "lr_dir", "data_mode", "out_dir"}


def parse_run_config(path: Path):
    """Strict JSON run description: TrainConfig fields plus corpus paths and
    the output directory. Unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - _TRAIN_FIELDS - _EXTRA_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key in ("stage", "hr_dir", "out_dir", "total_iters"):
        if key not in raw:
            raise ConfigError(f"config missing required key '{key}'")
    train_kw = {k: v for k, v in raw.items() if k in _TRAIN_FIELDS}
    if "grow_steps" in train_kw:
        train_kw["grow_steps"] = tuple(train_kw["grow_steps"])
    try:
        cfg = TrainConfig(**train_kw)
    except TypeError as e:
        raise ConfigError(f"bad config value: {e}") from e
    default_mode = "paired_synthetic" if cfg.stage == "sr" else "unpaired"
    data_mode = raw.get("data_mode", default_mode)
    lr_dir = raw.get("lr_dir")
    return cfg, {
        "hr_dir": Path(raw["hr_dir"]),
        "lr_dir": Path(lr_dir) if lr_dir else None,
        "data_mode": data_mode,
        "out_dir": Path(raw["out_dir"]),
    }


def _pngs(d: Path) -> list[Path]:
    d = Path(d)
    if not d.is_dir():
        raise DataError(f"input directory not found: {d}")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not files:
        raise DataError(f"no PNG files in: {d}")
    return files


def cmd_train_degrade(args) -> int:
    cfg, run = parse_run_config(args.config)
    if cfg.stage != "degrade":
        raise ConfigError(f"train-degrade needs stage 'degrade', got '{cfg.stage}'")
    index = build_index(run["hr_dir"], run["lr_dir"], run["data_mode"], cfg.scale_factor)
    path = run_stage1(cfg, index, run["out_dir"])
    print(f"checkpoint written: {path}")
    return 0


def cmd_train_sr(args) -> int:
    cfg, run = parse_run_config(args.config)
    if cfg.stage not in ("sr", "sr_unpaired"):
        raise ConfigError(f"train-sr needs stage 'sr' or 'sr_unpaired', got '{cfg.stage}'")
    index = build_index(run["hr_dir"], run["lr_dir"], run["data_mode"], cfg.scale_factor)
    path = run_stage2(cfg, index, run["out_dir"])
    print(f"checkpoint written: {path}")
    return 0


def cmd_degrade(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    expect_meta(ckpt.meta, stage="degrade")
    gen = load_stage1_generator(ckpt)
    out_dir = Path(args.out)
    count = 0
    for path in _pngs(args.input):
        rec = load_record(path, path.name)
        out = gen.forward(Variable(rec.pixels.astype(np.float32)))
        write_png(out_dir / path.name, to_uint8(out.degraded.data))
        if args.perturb is not None:
            jittered = perturb_flow(out, args.perturb, seed=args.seed + count)
            write_png(out_dir / f"{path.stem}_perturbed.png", to_uint8(jittered))
        count += 1
    print(f"degraded {count} image(s) -> {out_dir}")
    return 0


def cmd_superres(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    expect_meta(ckpt.meta, stage="sr")
    gen = load_sr_generator(ckpt)
    out_dir = Path(args.out)
    count = 0
    for path in _pngs(args.input):
        rec = load_record(path, path.name)
        sr = gen.forward(Variable(rec.pixels.astype(np.float32)))
        write_png(out_dir / path.name, to_uint8(sr.data))
        count += 1
    scale = 2 ** gen.active_levels
    print(f"super-resolved {count} image(s) at x{scale} -> {out_dir}")
    return 0


def cmd_eval(args) -> int:
    pred_files = {p.name: p for p in _pngs(args.pred)}
    gt_files = {p.name: p for p in _pngs(args.gt)}
    if set(pred_files) != set(gt_files):
        raise DataError("prediction and ground-truth file sets differ: "
                        f"{sorted(set(pred_files) ^ set(gt_files))[:5]}")
    entries = []
    for name in sorted(pred_files):
        pred01 = read_png(pred_files[name]).astype(np.float64).transpose(2, 0, 1)[None] / 255.0
        gt01 = read_png(gt_files[name]).astype(np.float64).transpose(2, 0, 1)[None] / 255.0
        if pred01.shape != gt01.shape:
            raise ShapeError(f"{name}: prediction {pred01.shape[2:]} vs "
                             f"ground truth {gt01.shape[2:]}")
        entries.append((name, psnr_y(pred01, gt01, args.crop_border),
                        ssim_y(pred01, gt01, args.crop_border)))
    report = build_report(entries)
    base = Path(args.out)
    write_report_tsv(report, base.with_suffix(".tsv"))
    write_report_json(report, base.with_suffix(".json"))
    print(f"evaluated {report.count} pair(s): mean PSNR {report.mean_psnr_db:.4f} dB, "
          f"mean SSIM {report.mean_ssim:.6f}")
    return 0


def cmd_dump_features(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    expect_meta(ckpt.meta, stage="sr")
    gen = load_sr_generator(ckpt)
    u8 = read_png(Path(args.input))
    maps = dump_condition_features(gen, Variable(from_uint8(u8)), args.level)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    for i, m in enumerate(maps):
        Image.fromarray(m, mode="L").save(out_dir / f"ch{i:03d}.png", format="PNG")
    print(f"wrote {len(maps)} feature map(s) -> {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsr",
                                description="Flow-field degradation + progressive "
                                            "self-conditioned super-resolution")
    sub = p.add_subparsers(dest="command", required=True)

    t1 = sub.add_parser("train-degrade", help="train the stage-1 degradation GAN")
    t1.add_argument("--config", required=True)
    t1.set_defaults(func=cmd_train_degrade)

    dg = sub.add_parser("degrade", help="apply a degradation checkpoint to images")
    dg.add_argument("--ckpt", required=True)
    dg.add_argument("--in", dest="input", required=True)
    dg.add_argument("--out", required=True)
    dg.add_argument("--perturb", type=float, default=None,
                    help="also write flow-jittered variants (noise std, px)")
    dg.add_argument("--seed", type=int, default=0)
    dg.set_defaults(func=cmd_degrade)

    t2 = sub.add_parser("train-sr", help="train the stage-2 SR GAN")
    t2.add_argument("--config", required=True)
    t2.set_defaults(func=cmd_train_sr)

    s = sub.add_parser("superres", help="upscale images with an SR checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_superres)

    e = sub.add_parser("eval", help="PSNR/SSIM report over two directories")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--out", required=True, help="report base path (.tsv/.json added)")
    e.add_argument("--crop-border", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    df = sub.add_parser("dump-features", help="export condition-branch gamma maps")
    df.add_argument("--ckpt", required=True)
    df.add_argument("--in", dest="input", required=True)
    df.add_argument("--level", type=int, required=True)
    df.add_argument("--out", required=True)
    df.set_defaults(func=cmd_dump_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, ShapeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return 4
    except FlowSRError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
