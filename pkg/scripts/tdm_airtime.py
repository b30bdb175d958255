"""Airtime error of the TDM scheduler against the planned leg fractions, per quantum size.

Prints the largest deviation from the planned split over a range of
horizons, in units of the quantum; the scheduler keeps it at or below one.
"""

import argparse

from awima.parallel import airtime, plan_parallel, schedule_tdm


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--bandwidths", type=float, nargs="+", default=[150_000, 50_000])
    ap.add_argument("--quanta", type=float, nargs="+", default=[0.01, 0.05, 0.1, 0.25, 0.5])
    ap.add_argument("--horizon", type=float, default=60.0)
    args = ap.parse_args()

    offers = [(f"SP{i}", b) for i, b in enumerate(args.bandwidths)]
    plan = plan_parallel("C0", offers, sum(args.bandwidths), radios=1)
    print("planned:", ", ".join(f"{l.sp} {l.fraction:.4f}" for l in plan.legs))
    print(f"{'quantum s':>10}{'slots':>8}{'max error (quanta)':>20}")
    for q in args.quanta:
        worst, slots_at_end = 0.0, 0
        steps = int(args.horizon / q)
        for n in range(1, steps + 1):
            horizon = n * q
            slots = schedule_tdm(plan, q, horizon)
            got = airtime(slots)
            worst = max(worst, max(abs(got.get(l.sp, 0.0) - l.fraction * horizon) for l in plan.legs) / q)
            slots_at_end = len(slots)
        print(f"{q:>10.3f}{slots_at_end:>8}{worst:>20.3f}")


if __name__ == "__main__":
    main()
