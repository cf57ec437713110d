"""select_group wall time as the queue grows.

Sizes are timed round-robin (best of --repeats), so a transient slowdown hits
every size alike rather than one step of the growth ratio.

    python scripts/scheduler_scaling.py --sizes 1000 2000 4000 8000
"""

import argparse
import gc
import json
import time

import numpy as np

from goodsched.scheduler import RequestEstimate, select_group


def synthetic_queue(n, rng):
    pr = rng.lognormal(0, 1, n)
    ctx = rng.integers(1, 8000, n)
    return [RequestEstimate(i, 100.0, 1.0, 10.0, float(pr[i]), float(pr[i]),
                            context_len=int(ctx[i]), arrival=float(i)) for i in range(n)]


def time_sizes(sizes, repeats=40, B=16, p=0.95, seed=11):
    rng = np.random.default_rng(seed)
    queues = {n: synthetic_queue(n, rng) for n in sizes}
    best = dict.fromkeys(sizes, np.inf)
    gc.disable()
    try:
        for _ in range(repeats):
            for n in sizes:
                t = time.perf_counter()
                select_group(queues[n], B, p)
                best[n] = min(best[n], time.perf_counter() - t)
    finally:
        gc.enable()
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 4000, 8000])
    ap.add_argument("--repeats", type=int, default=40)
    ap.add_argument("--json", action="store_true", help="print {size: seconds} only")
    args = ap.parse_args(argv)
    best = time_sizes(args.sizes, args.repeats)
    if args.json:
        print(json.dumps({str(n): t for n, t in best.items()}))
        return
    prev = None
    for n, t in best.items():
        growth = f"  x{t / best[prev]:.2f}" if prev else ""
        print(f"N={n:6d}: {t * 1e3:.3f} ms{growth}")
        prev = n


if __name__ == "__main__":
    main()
