#!/usr/bin/env python3
"""Desk-scale experiment: data, MM pre-training, centering ablation, probes, report.

    python3 scripts/run_desk.py runs/desk

Every stage goes through the ``dinomm`` command line, so each output
directory carries its own manifest.  Takes about 15 minutes on one core.
"""

import argparse
import sys
from pathlib import Path

from dinomm import cli

ROOT = Path(__file__).resolve().parents[1]


def run(*argv: str) -> None:
    print("$ dinomm", " ".join(argv), flush=True)
    code = cli.main(list(argv))
    if code:
        sys.exit(code)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("out", type=Path)
    p.add_argument("--config", type=Path, default=ROOT / "configs" / "desk.cfg")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-ablation", action="store_true")
    args = p.parse_args()

    out, cfg = args.out, str(args.config)
    data = out / "data"
    run("gen-data", "--n", "2000", "--test-n", "500", "--classes", "8", "--size", "64",
        "--seed", str(args.seed), "--out", str(data))
    train, test = str(data / "train.dmm"), str(data / "test.dmm")

    run("pretrain", "--data", train, "--config", cfg, "--out", str(out / "dino-mm"))
    runs = [out / "dino-mm"]
    if not args.skip_ablation:
        run("pretrain", "--data", train, "--config", cfg, "--out", str(out / "no-centering"),
            "--set", "train.center_momentum=1.0", "--set", "train.center_offset=5.0")
        runs.append(out / "no-centering")

    probes = [("random", "random"), (str(out / "dino-mm" / cli.CHECKPOINT_NAME), "dino-mm")]
    for ckpt, tag in probes:
        run("probe", "--checkpoint", ckpt, "--train", train, "--test", test, "--config", cfg,
            "--tag", tag, "--out", str(out / f"probe-{tag}"))
        runs.append(out / f"probe-{tag}")

    run("report", *map(str, runs), "--out", str(out / "summary"))


if __name__ == "__main__":
    main()
