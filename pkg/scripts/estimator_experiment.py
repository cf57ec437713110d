"""Quantile-forest coverage on held-out requests and how refinement tightens the bound.

    python scripts/estimator_experiment.py --q 0.95 --rounds 5
"""

import argparse

import numpy as np

from goodsched.engine import default_forest, llm_invocations
from goodsched.estimator import FeatureVector, content_hint, refinement_rows
from goodsched.workload import WorkloadConfig, generate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--q", type=float, default=0.95)
    ap.add_argument("--rounds", type=int, default=5)
    ap.add_argument("--held-out", type=int, default=2000)
    ap.add_argument("--traces", type=int, default=500)
    ap.add_argument("--seed", type=int, default=999)
    args = ap.parse_args(argv)

    forest = default_forest()
    reqs = generate(WorkloadConfig(kind="poisson", count=args.held_out + 500, seed=args.seed))
    rows = [(FeatureVector(li, r.app_tag, 0, stage, model, content_hint(lo, (r.id, node), 0)), lo)
            for r in reqs for node, li, lo, model, stage in llm_invocations(r)][:args.held_out]
    truth = np.array([y for _, y in rows])
    for q in sorted({0.5, 0.9, args.q}):
        b = np.ceil(forest.quantiles([f for f, _ in rows], [q])[:, 0] - 1e-9)
        print(f"q={q:.2f}: coverage {np.mean(truth <= b):.4f}, "
              f"median over-estimate {np.median((b - truth) / truth):+.3f}")

    over = [[] for _ in range(args.rounds + 1)]
    for r in reqs:
        if len(over[0]) == args.traces:
            break
        node, li, lo, model, stage = llm_invocations(r)[0]
        if lo <= 50 * args.rounds:
            continue
        rr = refinement_rows(FeatureVector(li, r.app_tag, 0, stage, model), lo, (r.id, node), 50,
                             args.rounds)
        qs = forest.quantiles([f for f, _ in rr], [args.q])[:, 0]
        for k in range(args.rounds + 1):
            up = max(np.ceil(qs[k] - 1e-9), rr[k][0].generated_so_far + 1)
            over[k].append((up - lo) / lo)
    for k, o in enumerate(over):
        print(f"round {k} (generated {50 * k:4d}): mean relative over-estimate {np.mean(o):.3f}")


if __name__ == "__main__":
    main()
