"""Command-line entry point.

Subcommands: train, eval, viz, replay-inspect, report. Every invocation
prints exactly one final machine-parseable JSON line on stdout and exits 0
on success, 2 on configuration/usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import config as configlib

CONFIG_EXIT = 2
RUNTIME_EXIT = 1


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _load_config(args) -> configlib.Config:
    if args.config:
        data = configlib.to_dict(configlib.from_file(args.config))
    else:
        data = configlib.to_dict(configlib.Config())
    overrides = list(args.set or [])
    if getattr(args, "logdir", None):
        overrides.append(f"run.logdir={args.logdir}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"run.seed={args.seed}")
    data = configlib.apply_overrides(data, overrides)
    return configlib.from_dict(data)


def _add_config_flags(parser, logdir: bool = True) -> None:
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted-key config override (repeatable)")
    parser.add_argument("--seed", type=int, default=None)
    if logdir:
        parser.add_argument("--logdir", help="output directory for this run")


def cmd_train(args) -> dict:
    from .pipeline import run
    cfg = _load_config(args)
    summary = run(cfg, resume=args.resume)
    return {"command": "train", **summary}


def cmd_eval(args) -> dict:
    from .pipeline import load_agent, run_eval
    if args.episodes < 1:
        raise configlib.ConfigError("--episodes must be >= 1")
    agent, cfg, manifest = load_agent(args.checkpoint)
    summary = run_eval(agent, cfg, seed=args.seed or 0,
                       episodes=args.episodes)
    return {"command": "eval", "checkpoint": args.checkpoint,
            "trained_env_steps": manifest["counters"]["env_steps"],
            **summary}


def cmd_viz(args) -> dict:
    from .pipeline import load_agent
    from .viz import render_episode_strips
    agent, cfg, _ = load_agent(args.checkpoint)
    written = render_episode_strips(
        agent, cfg, args.out, episodes=args.episodes,
        seed=args.seed or 0, max_steps=args.max_steps)
    return {"command": "viz", "out": str(args.out),
            "images": len(written)}


def cmd_replay_inspect(args) -> dict:
    from .replay import inspect_chunk
    directory = Path(args.dir)
    if not directory.is_dir():
        raise configlib.ConfigError(f"not a directory: {directory}")
    chunks, corrupt = [], []
    total_steps = 0
    episode_starts = 0
    terminals = 0
    version = None
    for path in sorted(directory.glob("*.bin")):
        try:
            info = inspect_chunk(path)
        except Exception as exc:
            corrupt.append({"file": path.name, "error": str(exc)})
            continue
        chunks.append(info)
        total_steps += info["steps"]
        episode_starts += info["episodes_started"]
        terminals += info["terminals"]
        version = info["format_version"]
    return {"command": "replay-inspect", "dir": str(directory),
            "chunks": len(chunks), "steps": total_steps,
            "episode_starts": episode_starts, "terminals": terminals,
            "format_version": version, "corrupt": corrupt}


def cmd_report(args) -> dict:
    from .viz import render_report
    metrics = Path(args.metrics)
    if not metrics.is_file():
        raise configlib.ConfigError(f"metrics file not found: {metrics}")
    result = render_report(metrics, args.out)
    return {"command": "report", **result}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dreamstack",
        description="Hierarchical world-model agent: train, evaluate, "
                    "visualize foresight, inspect replay, render reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training pipeline")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="run frozen-policy evaluation episodes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz", help="write foresight strip images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-steps", type=int, default=None,
                   help="cap strip count per episode")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("replay-inspect", help="summarize replay chunk files")
    p.add_argument("--dir", required=True)
    p.set_defaults(func=cmd_replay_inspect)

    p = sub.add_parser("report", help="render figures + CSV from metrics")
    p.add_argument("--metrics", required=True,
                   help="path to a metrics.jsonl file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and CONFIG_EXIT
    try:
        payload = args.func(args)
    except configlib.ConfigError as exc:
        _emit({"command": args.command, "error": str(exc),
               "error_kind": "config"})
        return CONFIG_EXIT
    except Exception as exc:
        _emit({"command": args.command, "error": str(exc),
               "error_kind": "runtime"})
        return RUNTIME_EXIT
    _emit({"ok": True, **payload})
    return 0


if __name__ == "__main__":
    sys.exit(main())
