"""Command line entry point: synth, build, restore, eval, stats."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .pipeline import cmd_build, cmd_eval, cmd_restore, cmd_stats, cmd_synth, parse_mode

DIST_FLAGS = {"in": "in_dist", "out": "out_dist"}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mgmoe", description=__doc__)
    p.add_argument("verb", nargs="?", choices=["synth", "build", "restore", "eval", "stats"])
    p.add_argument("inputs", nargs="*", help="restore: input PNG paths")
    p.add_argument("--config", help="JSON run config (defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the top-level seed")
    p.add_argument("--mode", default="auto", help="auto | instruction:<task>")
    p.add_argument("--dist", choices=sorted(DIST_FLAGS), help="restrict eval to one dist mode")
    p.add_argument("--sweep", choices=["fineness", "granularity"])
    p.add_argument("--out", default="restored", help="restore: output directory")
    p.add_argument("--force", action="store_true", help="build: rebuild every stage")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> dict:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise ValueError("--seed must be an unsigned 64-bit integer")
        cfg.seed = args.seed
    if args.print_config:
        print(cfg.to_json())
        return {"verb": "print-config"}
    if args.verb is None:
        raise ValueError("missing verb (synth, build, restore, eval, stats)")
    if args.verb == "synth":
        rows = cmd_synth(cfg)
        return {"verb": "synth", "images": len(rows)}
    if args.verb == "build":
        return {"verb": "build", "stages": cmd_build(cfg, force=args.force)}
    if args.verb == "restore":
        if not args.inputs:
            raise ValueError("restore needs at least one input PNG")
        parse_mode(args.mode)
        traces = cmd_restore(cfg, args.inputs, args.out, mode=args.mode)
        return {"verb": "restore", "images": len(traces), "out": args.out}
    if args.verb == "eval":
        path = cmd_eval(cfg, dist=DIST_FLAGS.get(args.dist), sweep=args.sweep)
        return {"verb": "eval", "csv": str(path)}
    path = cmd_stats(cfg)
    return {"verb": "stats", "csv": str(path)}


def main(argv=None) -> int:
    try:
        result = run(argv)
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - every failure becomes one machine-readable line
        msg = " ".join(str(e).split())
        print(json.dumps({"error": type(e).__name__, "message": msg}), file=sys.stderr)
        return 1
    if result.get("verb") != "print-config":
        print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
