"""Command line: run one scenario, compare backends, list workload presets."""
from __future__ import annotations

import argparse
import logging
import sys

from .harness import (
    BACKENDS, ConfigError, HarnessError, compare_backends, load_config, run_scenario,
    write_report,
)
from .telemetry import dumps_report
from .workload import PRESETS

log = logging.getLogger("iovsim")


def _scenario(args):
    sc = load_config(args.config)
    over = {}
    if getattr(args, "backend", None):
        over["backend"] = args.backend
    if getattr(args, "vms", None) is not None:
        over["n_vms"] = args.vms
    if getattr(args, "ssds", None) is not None:
        over["n_ssds"] = args.ssds
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    return sc.with_(**over) if over else sc


def _emit(report: dict, out) -> None:
    if out:
        write_report(report, out)
    else:
        doc = {k: v for k, v in report.items() if k != "csv"}
        sys.stdout.write(dumps_report(doc))


def _summary(report: dict) -> str:
    t = report.get("total") or {}
    return (f"{report['backend']}: {t.get('ops', 0)} ops in window, "
            f"iops={t.get('iops', 0.0):.1f} mean={t.get('mean_ns', 0.0) / 1000:.2f}us "
            f"p99={t.get('p99_ns', 0.0) / 1000:.2f}us exits={t.get('exits', 0)} "
            f"faults={t.get('faults', 0)} copies={t.get('copies', 0)}")


def cmd_run(args) -> int:
    sc = _scenario(args)
    try:
        report = run_scenario(sc, event_dump=args.dump_events)
    except HarnessError as exc:
        log.error("run failed: %s", exc)
        if args.out and exc.partial:
            write_report({"error": str(exc), **exc.partial}, args.out)
        return 1
    _emit(report, args.out)
    if args.out:
        print(_summary(report))
    return 0


def cmd_compare(args) -> int:
    sc = _scenario(args)
    try:
        report = compare_backends(sc)
    except HarnessError as exc:
        log.error("comparison failed: %s", exc)
        if args.out:
            write_report({"error": str(exc), **exc.partial}, args.out)
        return 1
    for run in report["runs"].values():
        run.pop("csv", None)
    _emit(report, args.out)
    if args.out:
        for b in report["ordering"]:
            print(_summary(report["runs"][b]))
    return 0


def cmd_workloads(args) -> int:
    for name, spec in PRESETS.items():
        print(f"{name}\tbs={spec.bs} rw={spec.rw} numjobs={spec.numjobs} iodepth={spec.iodepth}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iovsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", required=True)
    run.add_argument("--backend", choices=BACKENDS)
    run.add_argument("--vms", type=int)
    run.add_argument("--ssds", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="report JSON path; per-VM CSV is written alongside")
    run.add_argument("--dump-events", metavar="PATH", help="write the raw event ledger")
    run.set_defaults(fn=cmd_run)

    cmp_ = sub.add_parser("compare", help="run a scenario on every backend")
    cmp_.add_argument("--config", required=True)
    cmp_.add_argument("--vms", type=int)
    cmp_.add_argument("--ssds", type=int)
    cmp_.add_argument("--seed", type=int)
    cmp_.add_argument("--out")
    cmp_.set_defaults(fn=cmd_compare)

    wl = sub.add_parser("workloads", help="workload presets")
    wl_sub = wl.add_subparsers(dest="action", required=True)
    wl_sub.add_parser("list", help="print the presets").set_defaults(fn=cmd_workloads)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
