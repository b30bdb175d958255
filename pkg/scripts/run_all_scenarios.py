"""Run every bundled scenario, save traces and reports, and print a summary table."""

import argparse
import json
from pathlib import Path

from awima.sim import run_scenario
from awima.sim.cli import bundled_dir
from awima.sim.report import dump_report
from awima.sim.scenario import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs", help="output folder")
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"{'scenario':<26}{'sent':>7}{'deliv':>7}{'lost':>6}{'dups':>6}{'handoffs':>10}{'revenue':>9}")
    for path in sorted(bundled_dir().glob("*.yaml")):
        sc = load_scenario(path)
        trace, report = run_scenario(sc, seed=args.seed, check=args.check)
        (out / f"{sc.name}.trace.jsonl").write_text(trace.text())
        (out / f"{sc.name}.report.json").write_text(dump_report(report))
        flows = report["flows"].values()
        done = sum(h["outcome"] == "complete" for h in report["handoffs"])
        print(f"{sc.name:<26}{sum(f['sent'] for f in flows):>7}{sum(f['delivered'] for f in flows):>7}"
              f"{sum(f['lost'] for f in flows):>6}{sum(f['duplicates'] for f in flows):>6}"
              f"{done:>6}/{len(report['handoffs']):<3}{report['revenue']['total_milli']:>9}")
    print(f"traces and reports in {out}/")


if __name__ == "__main__":
    main()
