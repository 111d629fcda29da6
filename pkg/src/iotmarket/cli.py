"""Command line front end for scenario runs.

Exit codes: 0 on a clean run, 1 on usage or scenario errors, 2 when a
run aborts on a conservation or consistency violation.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness

LOG_LEVELS = ("debug", "info", "warning", "error", "critical")


class _Parser(argparse.ArgumentParser):
    # usage problems are exit code 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iotmarket", description="IoT data market simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    run = sub.add_parser("run", help="run a scenario to completion")
    run.add_argument("--scenario", required=True, help="path to a scenario TOML file")
    run.add_argument("--seed", required=True, type=int, help="run seed (u64)")
    run.add_argument("--until", type=int, default=None, help="stop before this tick")
    run.add_argument("--metrics-out", default=None, help="directory for metrics and audit files")
    run.add_argument("--chain-out", default=None, help="file for the chain export (jsonl)")
    run.add_argument("--trace", action="store_true", help="keep a per-event trace")
    run.add_argument("--log-level", default="warning", choices=LOG_LEVELS)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not 0 <= args.seed < 2**64:
        print("iotmarket: error: --seed must fit in 64 bits", file=sys.stderr)
        return 1
    if args.until is not None and args.until < 0:
        print("iotmarket: error: --until must not be negative", file=sys.stderr)
        return 1
    try:
        scenario = harness.load_scenario_file(args.scenario)
    except harness.ScenarioError as exc:
        print(f"iotmarket: scenario error: {exc}", file=sys.stderr)
        return 1

    sim = harness.Simulation(scenario, args.seed, trace=args.trace)
    try:
        report = sim.run(until=args.until)
    except harness.InvariantViolation as exc:
        print(f"iotmarket: invariant violation: {exc}", file=sys.stderr)
        return 2

    if args.metrics_out:
        for path in harness.emit_metrics(sim, report, args.metrics_out):
            print(f"wrote {path}")
    if args.chain_out:
        print(f"wrote {harness.export_chain(sim, args.chain_out)}")

    g = report.globals
    print(
        f"scenario={scenario.name} seed={args.seed} blocks={g['blocks']} "
        f"contracts={len(report.contracts)} transfers={g['transfers']} "
        f"disputes={g['disputes']} revenue={g['revenue']} "
        f"residual={g['conservation_residual']}"
    )
    print(f"report digest {report.digest()}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
