"""Command line: ``gridtwin run|validate|list-scenarios|report``.

Exit codes: 0 success, 1 validation error, 2 runtime abort.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .cosim import ConfigError, load_config, resolve_scenario, run_scenario, shipped_scenarios, write_outputs

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 1, 2


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def _positive(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("duration must be > 0")
    return value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridtwin", description="Cyber-physical smart grid twin with attack replay.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario and write artifacts")
    run.add_argument("--scenario", required=True, help="scenario file, or the name of a shipped scenario")
    run.add_argument("--out", help="output directory (default: runs/<scenario name>)")
    run.add_argument("--seed", type=_u64, help="override run.seed")
    run.add_argument("--duration", type=_positive, help="override run.duration_s (seconds)")
    run.add_argument("--report", action="store_true", help="also render figures into the output directory")
    val = sub.add_parser("validate", help="check a scenario file and list every problem")
    val.add_argument("--scenario", required=True)
    sub.add_parser("list-scenarios", help="list the shipped scenarios")
    rep = sub.add_parser("report", help="render figures from an existing run directory")
    rep.add_argument("--run", required=True, help="run directory containing results.csv")
    rep.add_argument("--out", help="figure directory (default: the run directory)")
    return p


def _load(name: str):
    return load_config(resolve_scenario(name))


def cmd_validate(args) -> int:
    try:
        cfg = _load(args.scenario)
    except ConfigError as err:
        for line in err.errors:
            print(line, file=sys.stderr)
        return EXIT_INVALID
    print(f"{cfg.source}: ok ({cfg.name}, {cfg.run.duration_s:g} s, {len(cfg.stages)} attack stages)")
    return EXIT_OK


def cmd_list(args) -> int:
    for name, path in shipped_scenarios().items():
        try:
            desc = load_config(path).description.split(".")[0]
        except ConfigError:
            desc = "(invalid)"
        print(f"{name:12s} {desc}")
    return EXIT_OK


def cmd_run(args) -> int:
    try:
        cfg = _load(args.scenario).with_overrides(args.seed, args.duration)
    except ConfigError as err:
        for line in err.errors:
            print(line, file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out) if args.out else Path("runs") / cfg.name
    result = run_scenario(cfg)
    try:
        paths = write_outputs(result, out)
        if args.report:
            from .report import render_report
            render_report(out)
    except OSError as err:
        print(f"cannot write artifacts: {err}", file=sys.stderr)
        return EXIT_ABORT
    for path in paths.values():
        print(path)
    if result.aborted:
        print(f"run aborted at t={result.rows[-1][0]:g} s: {result.abort_reason}", file=sys.stderr)
        return EXIT_ABORT
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_report
    run_dir = Path(args.run)
    if not (run_dir / "results.csv").exists():
        print(f"{run_dir}: no results.csv", file=sys.stderr)
        return EXIT_INVALID
    for path in render_report(run_dir, args.out):
        print(path)
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; here 2 means a runtime abort
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    handler = {"run": cmd_run, "validate": cmd_validate, "list-scenarios": cmd_list, "report": cmd_report}
    return handler[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
