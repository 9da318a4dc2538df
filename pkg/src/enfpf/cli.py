"""Command-line entry point: ``enfpf run | verify-kb | list-experiments``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, bundled_configs, load_config
from .errors import StabilityError
from .harness import emit_summary, format_kb_checks, run_experiment, run_kb_verify


def _resolve(path_or_name) -> Path:
    p = Path(path_or_name)
    if p.exists():
        return p
    bundled = bundled_configs()
    if path_or_name in bundled:
        return bundled[path_or_name]
    raise ConfigError(f"no config file {path_or_name!r} and no bundled config of that name")


def _load(args):
    cfg = load_config(_resolve(args.config))
    if getattr(args, "seed", None) is not None:
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    if cfg.experiment == "kb_verify":
        return _verify(cfg, args.out)
    result = run_experiment(cfg, out_dir=args.out, threads=args.threads)
    _, table = emit_summary(result)
    print(table)
    failed = [r for r in result.records if r.status != "ok"]
    for r in failed:
        print(f"replicate {r.replicate} arm {r.arm}: {r.status}", file=sys.stderr)
    print(f"outputs: {Path(args.out) / cfg.experiment / str(cfg.seed)}  ({result.wall_time:.1f} s)")
    return 1 if failed else 0


def _verify(cfg, out) -> int:
    try:
        result = run_kb_verify(cfg, out_dir=out)
    except StabilityError as exc:
        print(f"stability error: {exc}", file=sys.stderr)
        return 2
    print(format_kb_checks(result))
    return 0 if result.passed else 1


def cmd_verify_kb(args) -> int:
    cfg = _load(args)
    if cfg.experiment != "kb_verify":
        print(f"config is a {cfg.experiment} experiment, not kb_verify", file=sys.stderr)
        return 2
    return _verify(cfg, args.out)


def cmd_list(args) -> int:
    for name, path in bundled_configs().items():
        data = json.loads(path.read_text(encoding="utf-8"))
        model = data.get("model", {}).get("name", "-")
        print(f"{name:<22} {data['experiment']:<16} {model:<22} {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enfpf", description="Ensemble Fokker-Planck filter experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config")
    run.add_argument("--config", required=True, help="JSON config path or bundled config name")
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default="out", help="output root (default: out)")
    run.add_argument("--threads", type=int, default=1, help="replicates run concurrently on this many threads")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify-kb", help="run the density-space Kalman-Bucy checks")
    verify.add_argument("--config", required=True)
    verify.add_argument("--out", default="out")
    verify.set_defaults(func=cmd_verify_kb)

    lst = sub.add_parser("list-experiments", help="list bundled configs")
    lst.set_defaults(func=cmd_list)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
