"""Command-line entry point: `splatstream <stage> --config cfg.yaml [--set key=value ...]`."""
from __future__ import annotations

import argparse
import logging
import sys

import yaml

from .errors import SplatStreamError, StageError
from .pipeline import STAGES, PipelineConfig, apply_overrides, run_pipeline, run_stage, stage_synth


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatstream",
                                 description="Tiled volumetric-video streaming pipeline.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    commands = {"synth": "write a synthetic frame sequence",
                "run": "run every stage in order",
                "config": "print the effective configuration"}
    commands.update({s: f"run the {s} stage" for s in STAGES})
    for name, text in commands.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("-c", "--config", help="YAML config file")
        p.add_argument("-o", "--out", help="output directory (overrides out_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key, e.g. trace.seed=3")
        if name == "run":
            p.add_argument("--synth", action="store_true",
                           help="generate the synthetic scene before ingesting")
    return ap


def load_config(args) -> PipelineConfig:
    overrides = list(args.set)
    if args.out:
        overrides.append(f"out_dir={args.out}")
    if args.config:
        return PipelineConfig.load(args.config, overrides)
    return PipelineConfig.from_dict(apply_overrides({}, overrides))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
    except (OSError, ValueError, yaml.YAMLError, TypeError) as exc:
        print(f"error: [config] {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "config":
            print(yaml.safe_dump(cfg.to_dict(), sort_keys=True), end="")
        elif args.command == "synth":
            paths = stage_synth(cfg)
            print(f"wrote {len(paths)} frames to {cfg.out / 'frames'}")
        elif args.command == "run":
            print(run_pipeline(cfg, synth=args.synth))
        else:
            out = run_stage(cfg, args.command)
            for p in out if isinstance(out, list) else [out]:
                print(p)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SplatStreamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
