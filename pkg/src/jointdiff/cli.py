"""Command line entry point: ``jointdiff <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import diffusion as dm
from . import pipeline as pl
from .config import ConfigError, RunConfig, load_config, parse_lines
from .evalkit import write_report
from .netblocks import CheckpointError, ParamStore
from .scenesim import DatasetFormatError, read_dataset, write_dataset

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

TRAIN_STAGE = {"train-vae": "vae", "train-range": "range_ldm", "train-joint": "joint"}
SAMPLE_MODE = {"sample": "joint", "sample-l2c": "l2c", "sample-c2l": "c2l"}
COMMANDS = ("gen-data", *TRAIN_STAGE, *SAMPLE_MODE, "eval", "export-ppm")


class UsageError(Exception):
    """Flag or prerequisite problem; reported with exit status 2."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointdiff", description="Joint range-image and multi-view generation.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--ckpt", help="input checkpoint")
        p.add_argument("--data", help="gen-data directory (regenerated from the config when absent)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        if name in SAMPLE_MODE or name in ("eval", "export-ppm"):
            p.add_argument("--num-scenes", type=int)
        if name == "gen-data":
            p.add_argument("--num-scenes", type=int)
        if name in SAMPLE_MODE or name == "eval":
            p.add_argument("--steps", type=int)
            p.add_argument("--cfg-scale", type=float)
        if name in ("eval", "export-ppm"):
            p.add_argument("--samples", help="directory of sampled scenes")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.seed)
    overrides = parse_lines(args.set)
    if getattr(args, "steps", None) is not None:
        overrides["sample.steps"] = args.steps
    if getattr(args, "cfg_scale", None) is not None:
        overrides["sample.cfg_scale"] = args.cfg_scale
    if getattr(args, "num_scenes", None) is not None:
        overrides["sim.num_scenes" if args.command == "gen-data" else "sample.count"] = args.num_scenes
    cfg.update(overrides)
    return cfg


def _load_ckpt(path: Optional[str], need: str, command: str) -> ParamStore:
    if path is None:
        raise UsageError(f"{command} needs a stage-{need!r} checkpoint (--ckpt)")
    if not Path(path).is_file():
        raise UsageError(f"--ckpt: no such file {path}")
    return ParamStore.load(path)


def _joint_model(cfg: RunConfig, args):
    store = _load_ckpt(args.ckpt, "joint", args.command)
    if dm.stage_of(store) < dm.STAGE_ID["joint"]:
        raise UsageError(f"--ckpt: {args.ckpt} is not a stage-'joint' checkpoint")
    return pl.model_from_store(cfg, store)


def _conditioning(cfg: RunConfig, args):
    train, held = pl.load_data(cfg, args.data)
    return pl.eval_split(cfg, train, held)[: cfg["sample.count"]], held


def run(args, out: Path, log) -> None:
    cmd = args.command
    cfg = resolve_config(args)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = cfg.dump()
    (out / "config.txt").write_text(snapshot)
    log(snapshot.rstrip("\n"))

    if cmd == "gen-data":
        train, held = pl.gen_data(cfg, out)
        log(f"wrote {len(train)} train and {len(held)} holdout scenes to {out}")
    elif cmd in TRAIN_STAGE:
        stage = TRAIN_STAGE[cmd]
        prior = None
        if stage != "vae":
            need = dm.STAGES[dm.STAGE_ID[stage] - 2]
            prior = _load_ckpt(args.ckpt, need, cmd)
            try:
                dm.check_prerequisites(stage, prior)
            except dm.PrerequisiteError as exc:
                raise UsageError(f"{cmd}: {exc}") from None
        train, _ = pl.load_data(cfg, args.data)
        res = pl.run_stage(cfg, stage, train, prior, log)
        res.store.save(out / pl.CKPT_NAMES[stage])
        pl.write_loss_log(res, out / f"losses_{stage}.txt")
    elif cmd in SAMPLE_MODE:
        model = _joint_model(cfg, args)
        recs, _ = _conditioning(cfg, args)
        samples = pl.as_records(pl.sample_scenes(cfg, model, recs, SAMPLE_MODE[cmd]), recs)
        write_dataset(samples, out / "samples")
        log(f"wrote {len(samples)} samples to {out / 'samples'}")
    elif cmd == "eval":
        if args.samples:
            samples = read_dataset(args.samples)
            _, held = pl.load_data(cfg, args.data)
        elif args.ckpt:
            model = _joint_model(cfg, args)
            recs, held = _conditioning(cfg, args)
            samples = pl.as_records(pl.sample_scenes(cfg, model, recs), recs)
        else:
            raise UsageError("eval needs --ckpt or --samples")
        report = pl.evaluate_records(samples, held, pl.metric_names(cfg))
        write_report(report, out / "report.txt")
        log((out / "report.txt").read_text().rstrip("\n"))
    elif cmd == "export-ppm":
        if args.samples:
            recs = read_dataset(args.samples)
        else:
            train, held = pl.load_data(cfg, args.data)
            recs = train + held
        paths = pl.export_scenes(recs, out, args.num_scenes)
        log(f"wrote {len(paths)} images to {out}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE

    def log(msg: str) -> None:
        print(msg, flush=True)

    try:
        run(args, Path(args.out), log)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, DatasetFormatError, OSError, RuntimeError, ValueError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
