"""Command-line entry point.

Subcommands:

* ``run`` executes a scenario file and writes a deterministic JSON
  report and event trace; exit status 0 iff every expectation held.
* ``instrument`` rewrites an assembly file for sandboxed execution.
* ``overhead`` measures dynamic instrumentation cost over a corpus.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import ParseError, RewriteError
from .instrument import InstrumentationConfig, instrument
from .isa import format_program, parse_program
from .scenario import ScenarioConfig, run_overhead_report, run_scenario


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tmebox-sim",
        description="Multi-key memory-encryption sandbox simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario file")
    p_run.add_argument("scenario", type=Path)
    p_run.add_argument("--keyid-bits", type=int, default=6)
    p_run.add_argument("--mac-bits", type=int, default=28)
    p_run.add_argument("--mode", choices=("gs", "r15"), default="gs")
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--phys-pages", type=int, default=1 << 16)
    p_run.add_argument("--report", type=Path, default=None)
    p_run.add_argument("--trace", type=Path, default=None)

    p_ins = sub.add_parser("instrument", help="rewrite a program for sandboxing")
    p_ins.add_argument("--mode", choices=("gs", "r15"), required=True)
    p_ins.add_argument("--code-size", type=int, default=None,
                       help="reject output larger than this many instructions")
    p_ins.add_argument("--assert", dest="emit_assertions", action="store_true",
                       help="insert alias assertions after each rewrite")
    p_ins.add_argument("--data-only", action="store_true",
                       help="skip control-flow confinement")
    p_ins.add_argument("--offset-bits", type=int, default=48)
    p_ins.add_argument("--in", dest="infile", type=Path, required=True)
    p_ins.add_argument("--out", dest="outfile", type=Path, required=True)
    p_ins.add_argument("--report", type=Path, default=None)

    p_ovh = sub.add_parser("overhead", help="instruction-count overhead report")
    p_ovh.add_argument("--corpus", type=Path, required=True)
    p_ovh.add_argument("--report", type=Path, default=None)
    p_ovh.add_argument("--fuel", type=int, default=100_000)
    p_ovh.add_argument("--seed", type=int, default=0)
    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    config = ScenarioConfig(
        keyid_bits=args.keyid_bits,
        mac_bits=args.mac_bits,
        mode=args.mode,
        seed=args.seed,
        phys_pages=args.phys_pages,
    )
    try:
        result = run_scenario(args.scenario, config)
    except ParseError as e:
        print(f"scenario error: {e}", file=sys.stderr)
        return 2
    if args.report:
        args.report.write_text(result.to_json())
    if args.trace:
        args.trace.write_text("\n".join(result.trace) + "\n")
    for outcome in result.commands:
        status = "ok  " if outcome.ok else "FAIL"
        print(f"{status} {outcome.line:4} {outcome.text}"
              + (f"  [{outcome.detail}]" if outcome.detail else ""))
    print(f"scenario {'PASSED' if result.passed else 'FAILED'}")
    return 0 if result.passed else 1


def _cmd_instrument(args: argparse.Namespace) -> int:
    try:
        program = parse_program(args.infile.read_text())
        config = InstrumentationConfig(
            mode=args.mode,
            offset_bits=args.offset_bits,
            emit_assertions=args.emit_assertions,
            isolate_code=not args.data_only,
            code_capacity=args.code_size,
        )
        rewritten, report = instrument(program, config)
    except (ParseError, RewriteError) as e:
        print(f"instrument error: {e}", file=sys.stderr)
        return 2
    args.outfile.write_text(format_program(rewritten))
    if args.report:
        args.report.write_text(
            json.dumps(report.as_dict(), sort_keys=True, indent=2) + "\n")
    return 0


def _cmd_overhead(args: argparse.Namespace) -> int:
    report = run_overhead_report(args.corpus, fuel=args.fuel, seed=args.seed)
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.report:
        args.report.write_text(text)
    else:
        print(text, end="")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "instrument":
        return _cmd_instrument(args)
    return _cmd_overhead(args)


if __name__ == "__main__":
    sys.exit(main())
