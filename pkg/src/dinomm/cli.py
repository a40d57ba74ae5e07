"""``dinomm`` command line: gen-data, pretrain, probe, gradcheck, report.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import ast
import configparser
import dataclasses
import hashlib
import json
import logging
import os
import sys
import typing
from pathlib import Path

from . import __version__
from . import data as D
from . import evaluate as E
from . import gradcheck as G
from . import trainer as TR
from .augment import AugConfig
from .checkpoint import ConfigMismatchError, load_checkpoint
from .errors import ConfigError, DinoMMError
from .networks import ViTConfig

log = logging.getLogger("dinomm")

SECTIONS = {"vit": ViTConfig, "aug": AugConfig, "train": TR.TrainConfig, "probe": E.ProbeConfig}

CHECKPOINT_NAME = "checkpoint.dmck"
METRICS_NAME = "metrics.jsonl"
MANIFEST_NAME = "manifest.json"


class UsageError(Exception):
    """Bad flags or configuration; exit status 2."""


# ---------------------------------------------------------------------------
# configuration


def _parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_config_text(text: str) -> dict[str, dict]:
    """``key = value`` lines, either under ``[section]`` headers or as ``section.key``."""
    parser = configparser.ConfigParser(default_section="__defaults__", interpolation=None,
                                       delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config: {exc}") from None
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    for section in parser.sections():
        for key, raw in parser.items(section):
            # a section-prefixed key is absolute wherever it appears
            absolute = section == "__top__" or key.partition(".")[0] in SECTIONS
            full = key if absolute else f"{section}.{key}"
            set_override(out, full, raw)
    return out


def set_override(config: dict[str, dict], dotted: str, raw: str) -> None:
    section, _, key = dotted.partition(".")
    if section not in SECTIONS or not key:
        raise UsageError(f"config key {dotted!r} must look like <{'|'.join(SECTIONS)}>.<field>")
    fields = {f.name for f in dataclasses.fields(SECTIONS[section])}
    if key not in fields:
        raise UsageError(f"unknown {section} field {key!r}; valid fields: {', '.join(sorted(fields))}")
    config.setdefault(section, {})[key] = _parse_value(raw)


def _coerce(cls, values: dict) -> dict:
    hints = typing.get_type_hints(cls)
    out = {}
    for k, v in values.items():
        if typing.get_origin(hints.get(k)) is tuple and isinstance(v, list):
            v = tuple(v)
        out[k] = v
    return out


def build(section: str, values: dict):
    cls = SECTIONS[section]
    try:
        return cls(**_coerce(cls, values))
    except TypeError as exc:
        raise UsageError(f"[{section}] {exc}") from None


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    config = {s: {} for s in SECTIONS}
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {path} not found")
        config = parse_config_text(p.read_text())
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        set_override(config, key.strip(), value)
    return config


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, args: argparse.Namespace, resolved: dict, seed,
                   artifacts: list[Path], inputs: list[Path] = ()) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "config_path": getattr(args, "config", None),
        "config": resolved,
        "seed": seed,
        "output_dir": str(out_dir),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "artifacts": {p.name: sha256_file(p) for p in artifacts},
        "flags": {k: v for k, v in sorted(vars(args).items()) if k != "func"},
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DinoMMError(f"cannot create output directory {out}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    if args.n < 1 or args.classes < 1 or args.test_n < 0:
        raise UsageError("--n and --classes must be >= 1, --test-n >= 0")
    out = _out_dir(args.out)
    test_n = args.test_n if args.test_n else max(args.classes, args.n // 4)
    try:
        # both splits share class definitions (world_seed) but not samples
        train = D.generate_synthetic(args.n, args.classes, args.size, seed=2 * args.seed, world_seed=args.seed)
        test = D.generate_synthetic(test_n, args.classes, args.size, seed=2 * args.seed + 1, world_seed=args.seed)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    paths = [out / "train.dmm", out / "test.dmm"]
    D.save(train, paths[0])
    D.save(test, paths[1])
    resolved = {"n": args.n, "test_n": test_n, "classes": args.classes, "size": args.size}
    write_manifest(out, "gen-data", args, resolved, args.seed, paths)
    print(f"wrote {paths[0]} ({len(train)} samples) and {paths[1]} ({len(test)} samples)")
    return 0


MODES = {"mm": None, "s1-only": (0.0, 1.0, 0.0), "s2-only": (1.0, 0.0, 0.0)}


def run_configs_from(config: dict, mode: str = "mm"):
    aug_values = dict(config.get("aug", {}))
    if MODES[mode] is not None:
        aug_values["sensor_drop_probs"] = MODES[mode]
    return build("vit", config.get("vit", {})), build("aug", aug_values), build("train", config.get("train", {}))


def cmd_pretrain(args) -> int:
    config = load_config(args.config, args.set)
    vit, aug, cfg = run_configs_from(config, args.mode)
    dataset = D.load(args.data)
    out = _out_dir(args.out)
    ckpt_path, metrics_path = out / CHECKPOINT_NAME, out / METRICS_NAME
    resume = None
    if args.resume:
        if not ckpt_path.is_file():
            raise DinoMMError(f"--resume: no checkpoint at {ckpt_path}")
        resume = load_checkpoint(ckpt_path)
        # drop log lines past the checkpoint so the resumed trace continues it exactly
        if metrics_path.is_file():
            kept = [r for r in TR.read_metrics(metrics_path) if r["step"] < resume.step]
            metrics_path.write_text("".join(json.dumps(r) + "\n" for r in kept))
    elif metrics_path.exists():
        metrics_path.unlink()
    result = TR.train(dataset, vit, aug, cfg, resume=resume, stop_after=args.stop_after,
                      checkpoint_path=ckpt_path, metrics_path=metrics_path,
                      checkpoint_every=args.checkpoint_every)
    resolved = TR.run_configs(vit, aug, cfg)
    resolved["mode"] = args.mode
    write_manifest(out, "pretrain", args, resolved, cfg.seed, [ckpt_path, metrics_path], [Path(args.data)])
    last = result.metrics[-1] if result.metrics else None
    total = result.checkpoint.meta.get("total_steps")
    msg = f"step {result.checkpoint.step}/{total}"
    if last:
        msg += f"  loss {last['loss']:.4f}  teacher entropy {last['teacher_entropy']:.3f}"
    print(msg)
    return 0


def _split_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def cmd_probe(args) -> int:
    config = load_config(args.config, args.set)
    train = D.load(args.train)
    test = D.load(args.test)
    if args.checkpoint == "random":
        ckpt = None
        vit, aug, _ = run_configs_from(config)
        tag = args.tag or "random"
    else:
        if not Path(args.checkpoint).is_file():
            raise DinoMMError(f"checkpoint {args.checkpoint} not found")
        ckpt = load_checkpoint(args.checkpoint)
        vit = build("vit", ckpt.configs["vit"])
        aug = build("aug", ckpt.configs["aug"])
        tag = args.tag or Path(args.checkpoint).parent.name or "checkpoint"
    try:
        fractions = [float(f) for f in _split_list(args.fractions)]
    except ValueError:
        raise UsageError(f"--fractions must be comma-separated numbers, got {args.fractions!r}") from None
    modalities = _split_list(args.modalities)
    base = dict(config.get("probe", {}))
    grid: dict[tuple[str, float], float] = {}
    cells = []
    for frac in fractions:
        for mod in modalities:
            probe = build("probe", {**base, "label_fraction": frac, "modality": mod})
            res = E.evaluate(ckpt, train, test, probe, vit, aug, init_seed=args.init_seed)
            grid[(mod, frac)] = res.mAP
            cells.append(res.to_dict())
            log.info("%s %s @ %g: mAP %.4f", tag, mod, frac, res.mAP)
    out = _out_dir(args.out)
    text = E.format_report({tag: grid})
    (out / "report.txt").write_text(text + "\n")
    (out / "report.json").write_text(json.dumps({"tag": tag, "cells": cells}, indent=2, sort_keys=True) + "\n")
    inputs = [Path(args.train), Path(args.test)] + ([Path(args.checkpoint)] if ckpt is not None else [])
    resolved = {"vit": vit.to_dict(), "aug": json.loads(json.dumps(dataclasses.asdict(aug))), "probe": base,
                "fractions": fractions, "modalities": modalities}
    write_manifest(out, "probe", args, resolved, base.get("seed", 0),
                   [out / "report.txt", out / "report.json"], inputs)
    print(text)
    return 0


def cmd_gradcheck(args) -> int:
    results = G.run_suite(range(args.seeds), args.tolerance, args.composite_tolerance)
    print(G.format_results(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"FAILED: {r.name} (max rel err {r.max_error:.3e} >= {r.tolerance:.0e})", file=sys.stderr)
    return 1 if failed else 0


def _epoch_summary(rows: list[dict]) -> list[dict]:
    epochs: dict[int, list[dict]] = {}
    for r in rows:
        epochs.setdefault(r["epoch"], []).append(r)
    out = []
    for e, rs in sorted(epochs.items()):
        out.append({"epoch": e, "loss": sum(r["loss"] for r in rs) / len(rs),
                    "teacher_entropy": sum(r["teacher_entropy"] for r in rs) / len(rs),
                    "min_teacher_entropy": min(r["teacher_entropy"] for r in rs),
                    "lr": rs[-1]["lr"], "tau_t": rs[-1]["tau_t"], "steps": len(rs)})
    return out


def cmd_report(args) -> int:
    grid: dict[str, dict] = {}
    training: dict[str, list] = {}
    for run in args.runs:
        run = Path(run)
        if not run.is_dir():
            raise DinoMMError(f"{run} is not a run directory")
        found = False
        if (run / METRICS_NAME).is_file():
            training[run.name] = _epoch_summary(TR.read_metrics(run / METRICS_NAME))
            found = True
        if (run / "report.json").is_file():
            rep = json.loads((run / "report.json").read_text())
            row = grid.setdefault(rep["tag"], {})
            for cell in rep["cells"]:
                row[(cell["modality"], cell["config"]["label_fraction"])] = cell["mAP"]
            found = True
        if not found:
            raise DinoMMError(f"{run} holds neither {METRICS_NAME} nor report.json")
    lines = []
    for name, epochs in training.items():
        lines.append(f"pre-training {name}")
        lines.append(f"  {'epoch':>5} {'loss':>8} {'entropy':>8} {'min ent':>8} {'lr':>10} {'tau_t':>7}")
        for e in epochs:
            lines.append(f"  {e['epoch']:>5} {e['loss']:>8.4f} {e['teacher_entropy']:>8.3f} "
                         f"{e['min_teacher_entropy']:>8.3f} {e['lr']:>10.3e} {e['tau_t']:>7.4f}")
    if grid:
        lines.append("linear probe mAP (%)")
        lines.append(E.format_report(grid))
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = _out_dir(args.out)
        (out / "summary.txt").write_text(text + "\n")
        summary = {"training": training, "probe": json.loads(E.report_json(grid)) if grid else {}}
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dinomm", description="SAR-optical self-distillation at desk scale")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write synthetic train/test dataset files")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--test-n", type=int, default=0, help="default: max(classes, n // 4)")
    g.add_argument("--classes", type=int, default=8)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="self-supervised pre-training")
    t.add_argument("--data", required=True, help="training DatasetFile")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--mode", choices=sorted(MODES), default="mm")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", action="store_true", help=f"continue from OUT/{CHECKPOINT_NAME}")
    t.add_argument("--stop-after", type=int, help="stop after this many steps (simulated interruption)")
    t.add_argument("--checkpoint-every", type=int)
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("probe", help="linear-probe evaluation grid")
    e.add_argument("--checkpoint", required=True, help="checkpoint path, or 'random' for a fresh init")
    e.add_argument("--train", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--config")
    e.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    e.add_argument("--modalities", default="S1,S2,S1+S2")
    e.add_argument("--fractions", default="1.0,0.01")
    e.add_argument("--init-seed", type=int, default=0, help="seed of the random-init backbone")
    e.add_argument("--tag")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_probe)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    c.add_argument("--tolerance", type=float, default=G.OP_TOLERANCE)
    c.add_argument("--composite-tolerance", type=float, default=G.COMPOSITE_TOLERANCE)
    c.add_argument("--seeds", type=int, default=10)
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="summarise run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def _thread_limit():
    value = os.environ.get("DINOMM_THREADS")
    if not value:
        return None
    try:
        n = int(value)
        if n < 1:
            raise ValueError
    except ValueError:
        raise UsageError(f"DINOMM_THREADS must be a positive integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = _thread_limit()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (UsageError, ConfigError, ConfigMismatchError) as exc:
        print(f"dinomm: error: {exc}", file=sys.stderr)
        return 2
    except (DinoMMError, OSError) as exc:
        print(f"dinomm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
