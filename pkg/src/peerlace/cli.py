"""Command-line entry point.

Exit codes: 0 on success, 2 for a bad scenario or bad arguments, 1 when a
run fails at runtime.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from .aggregation import RULES
from .scenario import ConfigError, load_scenario
from .simulation import SimulationError, emit, run_scenario
from .studies import SCALING_COLUMNS, attack_study, compare_store_paths, scaling_study

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

MODES = {"det": "deterministic", "conc": "concurrent"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="peerlace", description="Simulated peer-to-peer robust SGD.")
    p.add_argument("-v", "--verbose", action="store_true", help="log protocol events to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run one scenario file")
    run.add_argument("--scenario", required=True, type=Path)
    run.add_argument("--out", required=True, type=Path, help="directory for metrics.csv and metrics.json")
    run.add_argument("--mode", choices=sorted(MODES), default=None)
    run.add_argument("--seed", type=int, default=None)

    cmp_ = sub.add_parser("compare-store", help="bytes moved by in-store vs fetch-process-restore paths")
    cmp_.add_argument("--len", dest="length", type=int, default=1000)
    cmp_.add_argument("--grads", type=int, default=10)
    cmp_.add_argument("--repetitions", type=int, default=100)

    sc = sub.add_parser("scaling", help="peer-count by batch-size grid")
    sc.add_argument("--peers", type=_int_list, default=[4, 6, 8])
    sc.add_argument("--batches", type=_int_list, default=[8, 16, 32])
    sc.add_argument("--out", type=Path, default=None, help="optional CSV path for the grid")

    at = sub.add_parser("attack-study", help="accuracy of one rule under one attack")
    at.add_argument("--rule", choices=RULES, required=True)
    at.add_argument("--attack", choices=["signflip", "noise", "none"], required=True)
    at.add_argument("--epochs", type=int, default=200)
    at.add_argument("--seed", type=int, default=0)
    return p


def _run(args) -> int:
    scenario = load_scenario(args.scenario, seed=args.seed, mode=MODES.get(args.mode), env=os.environ)
    metrics = run_scenario(scenario)
    args.out.mkdir(parents=True, exist_ok=True)
    emit(metrics, "csv", args.out / "metrics.csv")
    emit(metrics, "json", args.out / "metrics.json")
    print(json.dumps(metrics.summary, sort_keys=True))
    return EXIT_OK


def _compare(args) -> int:
    if args.length < 1 or args.grads < 1 or args.repetitions < 1:
        raise ConfigError("--len, --grads and --repetitions must be >= 1")
    print(json.dumps(compare_store_paths(args.length, args.grads, args.repetitions).to_dict(), indent=2))
    return EXIT_OK


def _scaling(args) -> int:
    rows = [row.to_dict() for row, _ in scaling_study(args.peers, args.batches)]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.DictWriter(out, fieldnames=SCALING_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def _attack(args) -> int:
    if args.epochs < 1:
        raise ConfigError("--epochs must be >= 1")
    print(json.dumps(attack_study(args.rule, args.attack, seed=args.seed, max_epochs=args.epochs).to_dict(), indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    handler = {"run": _run, "compare-store": _compare, "scaling": _scaling, "attack-study": _attack}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, OSError, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
