"""Command-line entry point.

Verbs:
    run <scenario>      execute a scenario file (or built-in name), write CSVs
    verify <scenario>   execute and check against the reference oracles
    bench <name>        run a built-in scenario and print a summary
    ledger <scenario>   execute and print the memory-ledger table

Exit codes: 0 success / all checks pass, 1 job failure or check failure,
2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .errors import ConfigError
from .harness import (NAMED_SCENARIOS, RunResult, Scenario, named_scenario,
                      run, verify)


def _load_scenario(ref: str, args) -> Scenario:
    if os.path.exists(ref):
        scenario = Scenario.from_file(ref)
    elif ref in NAMED_SCENARIOS:
        scenario = named_scenario(ref)
    else:
        raise ConfigError(
            f"{ref!r} is neither a scenario file nor one of {NAMED_SCENARIOS}")
    if getattr(args, "seed", None) is not None:
        scenario.model = dataclasses.replace(scenario.model, seed=args.seed)
    if getattr(args, "out", None) is not None:
        scenario.output_dir = args.out
    if getattr(args, "mode", None) is not None:
        scenario.mode = args.mode
        if scenario.mode == "process":
            for job in scenario.jobs:
                job.endpoint = "tcp"
    return scenario


def _print_run_summary(result: RunResult) -> None:
    print(f"scenario: {result.scenario.name}")
    print(f"jobs: {len(result.jobs)}  elapsed: {result.elapsed:.3f}s  "
          f"tokens: {result.total_tokens()}  "
          f"throughput: {result.throughput():.1f} tok/s")
    print(f"executor mean batch size: "
          f"{result.executor_metrics.mean_batch_size():.2f}  "
          f"dispatches: {result.executor_metrics.dispatches}")
    for err in result.errors():
        print(f"FAILED {err}")


def _print_ledgers(result: RunResult) -> None:
    ledgers = [result.executor_ledger] + [
        j.ledger for _, j in sorted(result.jobs.items()) if j.ledger is not None]
    print(f"{'component':<12} {'category':<20} {'bytes':>12}")
    for ledger in ledgers:
        for cat, nbytes in ledger.snapshot().items():
            print(f"{ledger.owner:<12} {cat:<20} {nbytes:>12}")
        print(f"{ledger.owner:<12} {'transient_high_water':<20} "
              f"{ledger.transient_high_water:>12}")


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="splitserve",
        description="Split-execution layer service: scenario runner")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("run", "verify", "ledger"):
        p = sub.add_parser(verb)
        p.add_argument("scenario", help="scenario JSON file or built-in name")
        p.add_argument("--seed", type=int, default=None,
                       help="override the model seed")
        p.add_argument("--out", default=None, help="output directory for CSVs")
        p.add_argument("--mode", choices=("thread", "process"), default=None,
                       help="in-process threads or one OS process per client")
    p = sub.add_parser("bench")
    p.add_argument("name", choices=NAMED_SCENARIOS)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--mode", choices=("thread", "process"), default=None)
    args = parser.parse_args(argv)

    try:
        ref = args.name if args.verb == "bench" else args.scenario
        scenario = _load_scenario(ref, args)
        result = run(scenario, output_dir=getattr(args, "out", None))
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    if args.verb in ("run", "bench"):
        _print_run_summary(result)
        return 0 if result.ok else 1
    if args.verb == "ledger":
        _print_ledgers(result)
        return 0 if result.ok else 1
    report = verify(scenario, result)
    print(report.render())
    return 0 if (result.ok and report.passed) else 1


if __name__ == "__main__":
    sys.exit(main())
