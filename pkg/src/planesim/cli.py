"""Command line entry points.

    planesim run SCENARIO [--out DIR] [--seed N]
    planesim report DIR
    planesim replay-check A B
    planesim gc-plan CHECKPOINTS --keep-newest K [--min-age-ms N] [--now T]
    planesim serve SCENARIO [--host H] [--port P]

Exit codes: 0 on success, 2 for configuration problems, 3 for runtime
failures (mismatched traces, missing artifacts, summary drift).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .bridge import Checkpoint, RetentionPolicy, gc_plan
from .errors import ConfigError, EmptyTrace, PlanesimError
from .report import read_jsonl, verify_summary
from .runner import run_scenario


def _trace_path(arg: str) -> Path:
    path = Path(arg)
    return path if path.suffix == ".tsv" else path / "trace.tsv"


def cmd_run(args) -> int:
    _, summary = run_scenario(args.scenario, out_dir=args.out, seed=args.seed)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    summary = verify_summary(args.dir)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_replay_check(args) -> int:
    path_a, path_b = _trace_path(args.a), _trace_path(args.b)
    lines_a = path_a.read_bytes().splitlines()
    lines_b = path_b.read_bytes().splitlines()
    if not lines_a:
        raise EmptyTrace(f"{path_a} has no events")
    if not lines_b:
        raise EmptyTrace(f"{path_b} has no events")
    for i, (la, lb) in enumerate(zip(lines_a, lines_b), start=1):
        if la != lb:
            raise RuntimeError(
                f"traces diverge at line {i}: "
                f"{la.decode()!r} != {lb.decode()!r}"
            )
    if len(lines_a) != len(lines_b):
        raise RuntimeError(
            f"traces diverge in length: {len(lines_a)} != {len(lines_b)} events"
        )
    print(f"traces identical ({len(lines_a)} events)")
    return 0


def cmd_gc_plan(args) -> int:
    rows = read_jsonl(Path(args.checkpoints))
    checkpoints = [Checkpoint.from_row(row) for row in rows]
    policy = RetentionPolicy(keep_newest=args.keep_newest, min_age_ms=args.min_age_ms)
    now = args.now
    if now is None:
        now = max((cp.created_at for cp in checkpoints), default=0)
    plan = gc_plan(checkpoints, policy, now)
    print(json.dumps(plan, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from .liveserver import serve

    serve(args.scenario, host=args.host, port=args.port, seed=args.seed)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planesim",
        description="Deterministic simulator for a shared batch and service fleet.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario to its horizon")
    p_run.add_argument("scenario", help="scenario YAML file")
    p_run.add_argument("--out", default=None, help="artifact output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override scenario seed")
    p_run.set_defaults(func=cmd_run)

    p_report = sub.add_parser(
        "report", help="recompute a summary from artifacts and verify it"
    )
    p_report.add_argument("dir", help="artifact directory from a previous run")
    p_report.set_defaults(func=cmd_report)

    p_replay = sub.add_parser(
        "replay-check", help="compare two trace files byte for byte"
    )
    p_replay.add_argument("a", help="artifact directory or trace.tsv")
    p_replay.add_argument("b", help="artifact directory or trace.tsv")
    p_replay.set_defaults(func=cmd_replay_check)

    p_gc = sub.add_parser(
        "gc-plan", help="plan checkpoint deletion under a retention policy"
    )
    p_gc.add_argument("checkpoints", help="checkpoints.jsonl from a run")
    p_gc.add_argument("--keep-newest", type=int, required=True)
    p_gc.add_argument("--min-age-ms", type=int, default=0)
    p_gc.add_argument(
        "--now", type=int, default=None,
        help="reference time in ms (default: newest checkpoint)",
    )
    p_gc.set_defaults(func=cmd_gc_plan)

    p_serve = sub.add_parser(
        "serve", help="serve a scenario over HTTP with a manually advanced clock"
    )
    p_serve.add_argument("scenario", help="scenario YAML file")
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--port", type=int, default=8080)
    p_serve.add_argument("--seed", type=int, default=None)
    p_serve.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PlanesimError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
