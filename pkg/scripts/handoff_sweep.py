"""Soft-handoff behaviour of the walking-client scenario across seeds and adhoc loss rates.

For each (loss, seed) the reliable flows must finish with nothing lost or
duplicated; the table shows handoff latency, the gap between leaving the old
SP and the tunnel coming back up, and how many retransmissions it took.
"""

import argparse
import dataclasses
import statistics

from awima.sim import run_scenario
from awima.sim.cli import bundled_dir
from awima.sim.scenario import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="graceful_handoff")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--loss", type=float, nargs="+", default=[0.0, 0.02, 0.05, 0.1])
    args = ap.parse_args()

    base = load_scenario(bundled_dir() / f"{args.scenario}.yaml")
    print(f"{'loss':>6}{'ok runs':>9}{'latency ms':>12}{'gap ms':>9}{'retx':>7}")
    for loss in args.loss:
        sc = dataclasses.replace(base, adhoc=dataclasses.replace(base.adhoc, loss=loss))
        lat, gap, retx, ok = [], [], [], 0
        for seed in range(1, args.seeds + 1):
            _, rep = run_scenario(sc, seed=seed)
            flows = rep["flows"].values()
            done = [h for h in rep["handoffs"] if h["outcome"] == "complete"]
            if done and all(f["lost"] == 0 and f["duplicates"] == 0 for f in flows):
                ok += 1
                lat.append(done[0]["latency_us"] / 1e3)
                gap.append(done[0]["disruption_us"] / 1e3)
            retx.append(sum(f["retransmits"] for f in flows))
        mean = lambda xs: statistics.mean(xs) if xs else float("nan")
        print(f"{loss:>6.2f}{ok:>5}/{args.seeds:<3}{mean(lat):>12.1f}{mean(gap):>9.1f}{mean(retx):>7.1f}")


if __name__ == "__main__":
    main()
