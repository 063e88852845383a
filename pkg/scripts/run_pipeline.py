#!/usr/bin/env python3
"""Desk-scale end-to-end run: corpus -> degradation training -> pseudo pairs
-> SR training -> inference -> Y-channel PSNR/SSIM report.

Everything lands under --workdir; rerunning with the same seed reproduces
identical outputs.
"""

import argparse
import json
import sys
from pathlib import Path

from flowsr.cli import main as flowsr
from flowsr.data import write_procedural_corpus


def run(argv):
    code = flowsr(argv)
    if code != 0:
        print(f"step failed (exit {code}): flowsr {' '.join(argv)}", file=sys.stderr)
        sys.exit(code)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--workdir", required=True)
    ap.add_argument("--count", type=int, default=16)
    ap.add_argument("--hr-size", type=int, default=64)
    ap.add_argument("--factor", type=int, default=4, choices=(2, 4, 8))
    ap.add_argument("--iters-degrade", type=int, default=300)
    ap.add_argument("--iters-sr", type=int, default=300)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.workdir)
    corpus = work / "corpus"
    write_procedural_corpus(corpus, count=args.count, hr_size=args.hr_size,
                            lr_factor=args.factor, seed=args.seed)
    print(f"corpus ready: {corpus}")

    degrade_cfg = {
        "stage": "degrade", "total_iters": args.iters_degrade, "batch": 4,
        "seed": args.seed, "lr": 2e-4, "lr_decay": "linear_last_half",
        "scale_factor": args.factor,
        "hr_dir": str(corpus / "hr"), "lr_dir": str(corpus / "lr"),
        "out_dir": str(work / "run_degrade"),
    }
    (work / "degrade.json").write_text(json.dumps(degrade_cfg, indent=2))
    run(["train-degrade", "--config", str(work / "degrade.json")])
    ckpt1 = work / "run_degrade" / "checkpoints" / "final.sfsr"

    lr_gen = work / "lr_gen"
    run(["degrade", "--ckpt", str(ckpt1), "--in", str(corpus / "clean_lr"),
         "--out", str(lr_gen)])

    grow = [args.iters_sr // 3] if args.factor >= 4 else []
    if args.factor == 8:
        grow.append(2 * args.iters_sr // 3)
    sr_cfg = {
        "stage": "sr", "total_iters": args.iters_sr, "batch": 4, "seed": args.seed,
        "lr": 0.003, "base_width": 16, "final_scale": args.factor,
        "scale_factor": args.factor, "grow_steps": grow,
        "data_mode": "pseudo_paired",
        "hr_dir": str(corpus / "hr"), "lr_dir": str(lr_gen),
        "out_dir": str(work / "run_sr"),
    }
    (work / "sr.json").write_text(json.dumps(sr_cfg, indent=2))
    run(["train-sr", "--config", str(work / "sr.json")])
    ckpt2 = work / "run_sr" / "checkpoints" / "final.sfsr"

    sr_out = work / "sr_out"
    run(["superres", "--ckpt", str(ckpt2), "--in", str(lr_gen), "--out", str(sr_out)])
    run(["eval", "--pred", str(sr_out), "--gt", str(corpus / "hr"),
         "--out", str(work / "report")])
    run(["dump-features", "--ckpt", str(ckpt2), "--in", str(lr_gen / "0000.png"),
         "--level", "1", "--out", str(work / "features")])
    print(f"done; report at {work / 'report.tsv'} / report.json")


if __name__ == "__main__":
    main()
