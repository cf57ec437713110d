"""Pattern-store match latency and next-stage share error on synthetic families.

    python scripts/pattern_experiment.py --families 25 --per-family 24
"""

import argparse
import time

import numpy as np

from goodsched.patterns import NoMatch, PatternStore, ShareMode, stage_fraction, stage_share
from goodsched.workload import pattern_families


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--families", type=int, default=25)
    ap.add_argument("--per-family", type=int, default=24)
    ap.add_argument("--stored", type=int, default=20, help="graphs per family put in the store")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    fams = {}
    for fam, g in pattern_families(args.families, args.per_family, args.seed, min_stages=5):
        fams.setdefault(fam, []).append(g)
    store, queries = PatternStore(), []
    for _, gs in sorted(fams.items()):
        for g in gs[:args.stored]:
            store.ingest(g)
        queries += gs[args.stored:]
    ts = []
    for q in queries:
        t = time.perf_counter()
        store.match(q.prefix(2))
        ts.append(time.perf_counter() - t)
    print(f"store {len(store)} graphs, {len(queries)} queries, match latency "
          f"median {np.median(ts) * 1e3:.3f} ms, p95 {np.percentile(ts, 95) * 1e3:.3f} ms")

    errs = {m: [] for m in range(1, 5)}
    mode_errs = {md: [] for md in ShareMode}
    misses = 0
    for q in queries:
        for m in range(1, 5):
            try:
                hit = store.match(q.prefix(m))
            except NoMatch:
                misses += 1
                continue
            truth = stage_share(q, m)
            errs[m].append(abs(stage_share(hit.pattern, m) - truth) / truth)
            for md in ShareMode:
                e, t = stage_fraction(hit.pattern, m, md), stage_fraction(q, m, md)
                mode_errs[md].append(abs(e - t) / t if t > 0 else abs(e - t))
    for m, e in errs.items():
        print(f"{m} revealed stage(s): share relative error {np.mean(e):.3f} (n={len(e)})")
    for md, e in mode_errs.items():
        print(f"mode {md.value:10s}: mean relative error {np.mean(e):.3f}")
    print(f"no-match queries: {misses}")


if __name__ == "__main__":
    main()
