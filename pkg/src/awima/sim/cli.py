"""Command-line entry point: run, validate, replay and batch.

Exit codes: 0 ok, 1 validation failure, 2 invariant violation, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Optional

from .report import dump_report, report_from_trace
from .scenario import ScenarioError, load_scenario
from .trace import parse_trace
from .world import InvariantViolation, World

OK, INVALID, VIOLATION, IO_ERROR = 0, 1, 2, 3

log = logging.getLogger("awima")


def bundled_dir() -> Path:
    return Path(str(resources.files("awima") / "scenarios"))


def resolve(name: str) -> Path:
    """A scenario path, or the name of a bundled scenario."""
    p = Path(name)
    if p.exists():
        return p
    candidate = bundled_dir() / f"{name}.yaml"
    return candidate if candidate.exists() else p


def _load(name: str):
    path = resolve(name)
    if not path.exists():
        raise FileNotFoundError(f"no scenario at {name}")
    return load_scenario(path)


def cmd_run(args) -> int:
    try:
        sc = _load(args.scenario)
    except ScenarioError as exc:
        for e in exc.errors:
            print(e, file=sys.stderr)
        return INVALID
    except OSError as exc:
        print(exc, file=sys.stderr)
        return IO_ERROR
    try:
        sink = open(args.trace, "w") if args.trace else None
    except OSError as exc:
        print(exc, file=sys.stderr)
        return IO_ERROR
    code = OK
    try:
        world = World(sc, args.seed, args.check, args.dump_bytes, sink)
        try:
            trace = world.run()
        except InvariantViolation as exc:
            print(f"invariant violated: {exc}", file=sys.stderr)
            trace, code = world.trace, VIOLATION
    finally:
        if sink is not None:
            sink.close()
    report = report_from_trace(trace.events(), partial=code != OK)
    try:
        if args.report:
            Path(args.report).write_text(dump_report(report))
    except OSError as exc:
        print(exc, file=sys.stderr)
        return IO_ERROR
    print(summary(report))
    return code


def cmd_validate(args) -> int:
    try:
        sc = _load(args.scenario)
    except ScenarioError as exc:
        for e in exc.errors:
            print(e, file=sys.stderr)
        return INVALID
    except OSError as exc:
        print(exc, file=sys.stderr)
        return IO_ERROR
    print(f"{sc.name}: ok ({len(sc.sps)} service providers, {len(sc.clients)} clients, {sc.duration:g} s)")
    return OK


def cmd_replay(args) -> int:
    try:
        text = Path(args.trace).read_text()
    except OSError as exc:
        print(exc, file=sys.stderr)
        return IO_ERROR
    events, broken = parse_trace(text)
    report = report_from_trace(events, partial=broken)
    try:
        if args.report:
            Path(args.report).write_text(dump_report(report))
        else:
            sys.stdout.write(dump_report(report))
    except OSError as exc:
        print(exc, file=sys.stderr)
        return IO_ERROR
    return OK


def _batch_one(job) -> tuple[str, int, Optional[dict], str]:
    path, seed, check, out = job
    try:
        sc = load_scenario(path)
    except ScenarioError as exc:
        return str(path), INVALID, None, "; ".join(exc.errors)
    world = World(sc, seed, check)
    code, note = OK, ""
    try:
        trace = world.run()
    except InvariantViolation as exc:
        trace, code, note = world.trace, VIOLATION, str(exc)
    report = report_from_trace(trace.events(), partial=code != OK)
    if out is not None:
        base = Path(out) / sc.name
        base.with_suffix(".trace.jsonl").write_text(trace.text())
        base.with_suffix(".report.json").write_text(dump_report(report))
    return sc.name, code, report, note


def cmd_batch(args) -> int:
    folder = Path(args.dir) if args.dir else bundled_dir()
    paths = sorted(folder.glob("*.yaml"))
    if not paths:
        print(f"no scenarios in {folder}", file=sys.stderr)
        return IO_ERROR
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    jobs = [(p, args.seed, args.check, args.out) for p in paths]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_batch_one, jobs))
    else:
        results = [_batch_one(j) for j in jobs]
    worst = OK
    for name, code, report, note in results:
        worst = max(worst, code)
        line = summary(report) if report is not None else note
        print(f"[{'ok' if code == OK else 'FAIL'}] {name}: {line}")
    return worst


def summary(report: dict) -> str:
    flows = report["flows"]
    sent = sum(f["sent"] for f in flows.values())
    got = sum(f["delivered"] for f in flows.values())
    done = sum(1 for h in report["handoffs"] if h["outcome"] == "complete")
    return (f"{report['events']} events, {got}/{sent} payloads delivered, "
            f"{done}/{len(report['handoffs'])} handoffs complete, "
            f"revenue {report['revenue']['total_milli']} milli"
            + (" (partial)" if report["partial"] else ""))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="awima", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--scenario", required=True, help="scenario file or bundled scenario name")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trace", help="write the JSON-lines trace here")
    run.add_argument("--report", help="write the JSON report here")
    run.add_argument("--check", action="store_true", help="assert invariants after every event")
    run.add_argument("--dump-bytes", action="store_true", help="include wire bytes in the trace")
    run.set_defaults(fn=cmd_run)

    val = sub.add_parser("validate", help="check a scenario file")
    val.add_argument("--scenario", required=True)
    val.set_defaults(fn=cmd_validate)

    rep = sub.add_parser("replay", help="rebuild a report from a saved trace")
    rep.add_argument("--trace", required=True)
    rep.add_argument("--report")
    rep.set_defaults(fn=cmd_replay)

    bat = sub.add_parser("batch", help="run every scenario in a folder")
    bat.add_argument("--dir", help="scenario folder (default: the bundled scenarios)")
    bat.add_argument("--jobs", type=int, default=1)
    bat.add_argument("--seed", type=int, default=None)
    bat.add_argument("--check", action="store_true")
    bat.add_argument("--out", help="write traces and reports here")
    bat.set_defaults(fn=cmd_batch)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
