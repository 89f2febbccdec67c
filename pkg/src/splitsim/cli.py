"""Command line entry point: ``splitsim run|sweep|validate|replay``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from splitsim.errors import ConfigError
from splitsim.experiment import (
    EXIT_OK,
    OUTPUT_ENV,
    SweepSpec,
    exit_code,
    load_config,
    load_json,
    run_experiment,
    run_sweep,
)
from splitsim.metrics import replay, write_atomic


def _cmd_run(args) -> int:
    overrides = list(args.set or [])
    if args.emit_events:
        overrides.append("emit_event_log=true")
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    cfg = load_config(args.config, overrides)
    report = run_experiment(cfg)
    print(report.summary_line())
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_config(args.config, list(args.set or []))
    print(f"ok: {cfg.scheduler.policy}, {len(cfg.requests())} requests")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    spec = SweepSpec.from_dict(load_json(args.config))
    out = args.output_dir or spec.output_dir or os.environ.get(OUTPUT_ENV)
    if not out:
        raise ConfigError("output_dir", f"not set for sweep (and ${OUTPUT_ENV} is empty)")
    code, path = run_sweep(spec, out, jobs=args.jobs)
    print(f"wrote {path}")
    return code


def _cmd_replay(args) -> int:
    text = Path(args.events).read_text(encoding="utf-8")
    report = replay(text)
    out = Path(args.output_dir) if args.output_dir else Path(args.events).parent
    out.mkdir(parents=True, exist_ok=True)
    write_atomic(out / "report.json", report.to_json())
    print(report.summary_line())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitsim", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("-c", "--config", required=True)
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a dotted config path (repeatable)")
    r.add_argument("--emit-events", action="store_true", help="also write events.csv")
    r.add_argument("-o", "--output-dir")
    r.set_defaults(func=_cmd_run)

    s = sub.add_parser("sweep", help="run a parameter sweep")
    s.add_argument("-c", "--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("-o", "--output-dir")
    s.set_defaults(func=_cmd_sweep)

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("-c", "--config", required=True)
    v.add_argument("--set", action="append", metavar="KEY=VALUE")
    v.set_defaults(func=_cmd_validate)

    rp = sub.add_parser("replay", help="rebuild report.json from an event log")
    rp.add_argument("events")
    rp.add_argument("-o", "--output-dir")
    rp.set_defaults(func=_cmd_replay)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        code = exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
