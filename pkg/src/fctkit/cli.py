"""Command-line front end.

Every subcommand stages its outputs in a scratch directory next to ``--out``
and moves them into place only after the command succeeded, so a failing
command leaves the output directory untouched.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Iterator, List, Optional

from . import persistence, pipeline
from .config import ExperimentConfig, load_config, shipped_config_path
from .errors import ConfigError, FCTError
from .updates import apply_fct_update

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DEFAULT_CONFIG = "toy_imagenet_analog"

log = logging.getLogger("fctkit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@contextlib.contextmanager
def staged_output(out: Path) -> Iterator[Path]:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}-staging-", dir=out.parent))
    try:
        yield tmp
        out.mkdir(exist_ok=True)
        for f in sorted(tmp.iterdir()):
            os.replace(f, out / f.name)
    finally:
        shutil.rmtree(tmp, ignore_errors=True)


def resolve_config(ref: Optional[str], seed: Optional[int], out: Optional[str]) -> ExperimentConfig:
    ref = ref or DEFAULT_CONFIG
    path = Path(ref)
    if not path.exists() and path.suffix == "":
        path = shipped_config_path(ref)
    return load_config(path).with_overrides(seed=seed, output_dir=out)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help=f"YAML config path or shipped name (default {DEFAULT_CONFIG})")
    p.add_argument("--seed", type=int, help="run seed; shifts every stage seed")
    p.add_argument("--out", help="output directory (default: the config's output_dir)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fctkit", description="Forward-compatible embedding updates on a toy domain.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("gen-data", help="sample the train/eval splits"))
    p = sub.add_parser("train-embedder", help="train the old or new embedding model")
    _common(p)
    p.add_argument("--role", choices=("old", "new"), required=True)
    _common(sub.add_parser("train-side-info", help="train the side-information model"))
    _common(sub.add_parser("train-transform", help="train the transformation h"))
    _common(sub.add_parser("eval", help="evaluate all pairings and write reports"))
    p = sub.add_parser("update", help="apply a transformation to a stored gallery file")
    _common(p)
    p.add_argument("--gallery", required=True)
    p.add_argument("--transform", required=True, help="checkpoint of h")
    p.add_argument("--side-transform", help="checkpoint of g; omit for a terminal update")
    p.add_argument("--batch-size", type=int, default=1024)
    p = sub.add_parser("simulate-costs", help="backfill vs transformation cost report")
    _common(p)
    p.add_argument("--devices", type=int)
    p.add_argument("--records-per-device", type=int)
    p = sub.add_parser("run", help="the full pipeline")
    _common(p)
    p.add_argument("--dry-run", action="store_true", help="print the stage plan and exit")
    return parser


def _cmd_update(args, out: Path, dst: Path):
    store = persistence.load_gallery(args.gallery)
    h, _ = persistence.load_network(args.transform)
    g = persistence.load_network(args.side_transform)[0] if args.side_transform else None
    moved = apply_fct_update(store, h, g, batch_size=args.batch_size)
    name = f"gallery_v{moved.model_version}.fctg"
    persistence.save_gallery(moved, dst / name, {"source": Path(args.gallery).name,
                                                 "transform": Path(args.transform).name})
    print(f"wrote {out / name}: {len(moved)} records, d_emb={moved.d_emb}, d_side={moved.d_side}, "
          f"version {moved.model_version}")


def _dispatch(args, cfg: ExperimentConfig, out: Path, dst: Path):
    cmd = args.command
    if cmd == "gen-data":
        pipeline.gen_data(cfg, dst)
    elif cmd == "train-embedder":
        pipeline.stage_train_embedder(cfg, out, dst, args.role)
    elif cmd == "train-side-info":
        pipeline.stage_train_side_info(cfg, out, dst)
    elif cmd == "train-transform":
        pipeline.stage_train_transform(cfg, out, dst)
    elif cmd == "eval":
        rows = pipeline.stage_eval(cfg, out, dst)
        print((dst / "report.csv").read_text(), end="")
        return rows
    elif cmd == "update":
        _cmd_update(args, out, dst)
    elif cmd == "simulate-costs":
        costs = cfg.costs
        if args.devices is not None:
            costs = dataclasses.replace(costs, device_count=args.devices)
        if args.records_per_device is not None:
            costs = dataclasses.replace(costs, records_per_device=args.records_per_device)
        cfg = dataclasses.replace(cfg, costs=costs)
        cfg.validate()
        pipeline.stage_simulate_costs(cfg, dst)
        print((dst / "costs.txt").read_text(), end="")
    elif cmd == "run":
        pipeline.run(cfg, dst)
        print((dst / "report.csv").read_text(), end="")


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.seed, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(cfg.output_dir)
    if args.command == "run" and args.dry_run:
        print("\n".join(pipeline.stage_plan(cfg)))
        print(f"outputs -> {out}")
        return EXIT_OK
    try:
        with staged_output(out) as dst:
            _dispatch(args, cfg, out, dst)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FCTError, OSError, ValueError, ArithmeticError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
