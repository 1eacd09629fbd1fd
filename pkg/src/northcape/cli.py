"""Command line: ``run``, ``stats`` and ``fuzz``.

Exit codes: 0 success, 1 failed assert or fuzz divergence, 2 unreadable input.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .fuzz import fuzz
from .machine import MachineConfig
from .ntlb import FAULT_INJECTIONS
from .scenario import ParseError, run_scenario


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--no-cache", action="store_true", help="resolve every access without the NTLB")
    p.add_argument("--seed", type=int, default=None, help="seed for nonces and the random source")
    p.add_argument("--l1-size", type=int, default=None, help="entries in each L1 buffer")
    p.add_argument("--l2-size", type=int, default=None, help="entries in the shared L2")
    p.add_argument("--l2-assoc", type=int, default=None, help="L2 associativity")
    p.add_argument("--trace-out", type=Path, default=None, help="write the trace here instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="northcape", description="Capability machine emulator")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="execute a scenario and print its trace")
    run.add_argument("scenario", type=Path)
    _common(run)
    run.add_argument("--spin-limit", type=int, default=None, help="spins before a stack pool claim gives up")
    stats = sub.add_parser("stats", help="execute a scenario and print counters")
    stats.add_argument("scenario", type=Path)
    _common(stats)
    stats.add_argument("--spin-limit", type=int, default=None)
    fz = sub.add_parser("fuzz", help="cached vs uncached differential run")
    _common(fz)
    fz.add_argument("--steps", type=int, default=10_000)
    fz.add_argument("--inject", choices=FAULT_INJECTIONS, default=None, help="deliberately break the cache")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    out = {
        "seed": args.seed,
        "l2_size": args.l2_size,
        "l2_assoc": args.l2_assoc,
        "cache": False if args.no_cache else None,
    }
    if args.l1_size is not None:
        out["l1_instr"] = out["l1_data"] = args.l1_size
    return out


def _emit(text: str, dest: Path | None) -> None:
    if dest is None:
        sys.stdout.write(text)
    else:
        dest.write_text(text)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "fuzz":
        cfg = MachineConfig(memory_size=1 << 22, cmt_slots=1024, trace_limit=64)
        for key, value in _overrides(args).items():
            if value is not None and key != "cache":
                setattr(cfg, key, value)
        report = fuzz(args.seed or 0, args.steps, args.inject, cfg)
        _emit(report.text(), args.trace_out)
        return 0 if report.ok else 1
    try:
        result = run_scenario(args.scenario, spin_limit=args.spin_limit, **_overrides(args))
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return 2
    if args.command == "run":
        _emit(result.trace, args.trace_out)
    else:
        if args.trace_out is not None:
            args.trace_out.write_text(result.trace)
        sys.stdout.write("".join(line + "\n" for line in result.stats))
    for failure in result.failures:
        print(f"assert failed: {failure}", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
