"""FCFS SLO attainment (and GMAX/LTR goodput) as the arrival rate grows.

Used to pick the load for the policy ranking: FCFS should attain 40-70%.

    python scripts/load_sweep.py --rates 1.5 2.0 2.25 2.5 --count 1000
"""

import argparse

from goodsched.config import RunConfig
from goodsched.engine import run
from goodsched.metrics import goodput_report
from goodsched.workload import WorkloadConfig, generate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rates", type=float, nargs="+", default=[1.5, 2.0, 2.25, 2.5, 3.0])
    ap.add_argument("--count", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--policies", nargs="+", default=["fcfs", "gmax", "ltr"])
    args = ap.parse_args(argv)
    for rate in args.rates:
        trace = generate(WorkloadConfig(kind="poisson", count=args.count, seed=args.seed, rate=rate))
        parts = []
        for pol in args.policies:
            rep = goodput_report(run(trace, pol, RunConfig(seed=args.seed)))
            parts.append(f"{pol} {rep.total_goodput:11.0f} ({rep.attainment:.2f})")
        print(f"rate {rate:5.2f}: " + "  ".join(parts), flush=True)


if __name__ == "__main__":
    main()
