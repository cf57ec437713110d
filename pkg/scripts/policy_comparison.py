"""Token goodput of every policy on the mixed 1:1:1 Poisson workload.

    python scripts/policy_comparison.py --rate 2.25 --count 5000 --seeds 0 1 2 3 4
"""

import argparse
import csv
import sys
import time

from goodsched.config import RunConfig
from goodsched.engine import default_forest, run
from goodsched.metrics import goodput_report
from goodsched.workload import WorkloadConfig, generate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rate", type=float, default=2.25)
    ap.add_argument("--count", type=int, default=5000)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--policies", nargs="+", default=["gmax", "fcfs", "edf", "ltr", "plas"])
    ap.add_argument("--csv", help="write per-seed rows here")
    args = ap.parse_args(argv)

    default_forest()
    rows = []
    for seed in args.seeds:
        trace = generate(WorkloadConfig(kind="poisson", count=args.count, seed=seed, rate=args.rate))
        for pol in args.policies:
            t = time.perf_counter()
            rep = goodput_report(run(trace, pol, RunConfig(seed=seed)))
            rows.append({"seed": seed, "policy": pol, "goodput": rep.total_goodput,
                         "attainment": rep.attainment, "drops": rep.drops,
                         "preemptions": rep.preemptions, "seconds": time.perf_counter() - t,
                         **{f"goodput_{k}": v for k, v in rep.by_class.items()}})
            r = rows[-1]
            print(f"seed {seed} {pol:5s} goodput {r['goodput']:12.0f} attainment "
                  f"{r['attainment']:.3f} drops {r['drops']:5d} ({r['seconds']:.0f}s)", flush=True)
        best = max(r["goodput"] for r in rows if r["seed"] == seed and r["policy"] != "gmax")
        g = next(r["goodput"] for r in rows if r["seed"] == seed and r["policy"] == "gmax")
        print(f"seed {seed}: gmax / best baseline = {g / best:.3f}", flush=True)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


if __name__ == "__main__":
    sys.exit(main())
