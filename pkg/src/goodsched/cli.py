"""Command line driver: gen | run | analyze | report.

Outputs default to $GOODSCHED_OUT (or the current directory). Every output is
written only after the work succeeded, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

from .config import RunConfig
from .core import ConfigError, InvalidTrace
from .metrics import GoodputReport, GoodputSpec, goodput_report
from .workload import KINDS, UnknownKind, WorkloadConfig, dumps_trace, generate, read_trace

log = logging.getLogger("goodsched")

OUT_ENV = "GOODSCHED_OUT"


class SchemaMismatch(ValueError):
    """Result files that cannot be compared (none given, or not SimResult JSON)."""


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "."))


def _resolve(path: str | None, default_name: str) -> Path:
    if path:
        return Path(path)
    return default_out_dir() / default_name


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# --- gen ------------------------------------------------------------------------

def cmd_gen(args) -> Path:
    wc = WorkloadConfig(kind=args.kind, count=args.count, seed=args.seed, rate=args.rate,
                        arrival=args.arrival)
    reqs = generate(wc)
    out = _resolve(args.out, f"{args.kind}_{args.count}_s{args.seed}.jsonl")
    _write(out, dumps_trace(reqs))
    log.info("wrote %d requests to %s", len(reqs), out)
    return out


# --- run ------------------------------------------------------------------------

def _parse_value(s: str):
    try:
        return json.loads(s)
    except json.JSONDecodeError:
        return s


def build_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    over = {}
    for name in ("policy", "B", "p", "seed", "slo_scale", "waiting_time", "delta_iters", "q"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        over[k] = _parse_value(v)
    return cfg.with_(**over) if over else cfg


def cmd_run(args) -> tuple[Path, Path]:
    from .engine import run    # heavy import kept off the gen/report paths

    cfg = build_config(args)
    reqs = read_trace(args.trace)
    res = run(reqs, config=cfg)
    rep = goodput_report(res, cfg.goodput)
    stem = Path(args.trace).stem + f"_{cfg.policy}"
    out_dir = Path(args.out_dir) if args.out_dir else default_out_dir()
    res_path, csv_path = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    _write(res_path, res.to_json(include_frames=args.frames))
    _write(csv_path, rep.to_csv())
    log.info("%s: goodput %.1f, attainment %.3f", cfg.policy, rep.total_goodput, rep.attainment)
    return res_path, csv_path


# --- analyze ----------------------------------------------------------------------

def cmd_analyze(args) -> Path:
    from .analysis import appendix_report

    rep = appendix_report(T=args.T, N=args.N, M=args.M, seed=args.seed,
                          n_instances=args.instances, grid_resolution=args.grid)
    out = _resolve(args.out, "appendix_report.json")
    _write(out, json.dumps(rep, indent=2, sort_keys=True) + "\n")
    log.info("bound p=1: %.6f (1/%.3f)", rep["bound_p1"], 1 / rep["bound_p1"])
    return out


# --- report -------------------------------------------------------------------------

def load_reports(paths, spec: GoodputSpec | None = None) -> list[GoodputReport]:
    from .engine import SimResult

    if not paths:
        raise SchemaMismatch("no result files given")
    reps = []
    for p in paths:
        try:
            d = json.loads(Path(p).read_text())
            res = SimResult.from_dict(d)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise SchemaMismatch(f"{p}: not a simulation result ({e})") from e
        gs = spec
        if gs is None:
            gd = (res.config or {}).get("goodput")
            gs = GoodputSpec.from_dict(gd) if gd else GoodputSpec()
        reps.append(goodput_report(res, gs))
    return reps


def comparison_csv(reports: list[GoodputReport]) -> str:
    """One row per (policy, metric) plus each policy's goodput over the best one."""
    if not reports:
        raise SchemaMismatch("nothing to compare")
    best = max(r.total_goodput for r in reports)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "metric", "value", "goodput_ratio"])
    for r in reports:
        ratio = r.total_goodput / best if best > 0 else 0.0
        for pol, metric, value in r.rows():
            w.writerow([pol, metric, "" if value is None else value, f"{ratio:.6f}"])
    return buf.getvalue()


def cmd_report(args) -> Path:
    reps = load_reports(args.results)
    out = _resolve(args.out, "comparison.csv")
    _write(out, comparison_csv(reps))
    return out


# --- entry point ----------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="goodsched", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate a synthetic trace (JSONL)")
    g.add_argument("--kind", default="poisson", help=f"one of {', '.join(KINDS)}")
    g.add_argument("--count", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--rate", type=float, default=1.0, help="mean arrivals per second")
    g.add_argument("--arrival", choices=("poisson", "bursty"), default=None)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gen)

    r = sub.add_parser("run", help="simulate a trace under one policy")
    r.add_argument("trace")
    r.add_argument("--config", help="RunConfig JSON file")
    r.add_argument("--policy")
    r.add_argument("--B", type=int)
    r.add_argument("--p", type=float)
    r.add_argument("--q", type=float)
    r.add_argument("--delta-iters", dest="delta_iters", type=int)
    r.add_argument("--waiting-time", dest="waiting_time", type=float)
    r.add_argument("--slo-scale", dest="slo_scale", type=float)
    r.add_argument("--seed", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="any RunConfig field: " + ", ".join(f.name for f in fields(RunConfig)))
    r.add_argument("--frames", action="store_true", help="keep per-frame batch compositions")
    r.add_argument("--out-dir")
    r.set_defaults(fn=cmd_run)

    a = sub.add_parser("analyze", help="adversarial traces, oracle checks and the bound")
    a.add_argument("--T", type=float, default=10.0)
    a.add_argument("--N", type=int, default=9)
    a.add_argument("--M", type=float, default=100.0)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--instances", type=int, default=50)
    a.add_argument("--grid", type=int, default=200)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("report", help="compare SimResult files in one CSV")
    p.add_argument("results", nargs="*")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        out = args.fn(args)
    except (InvalidTrace, ConfigError, UnknownKind, SchemaMismatch, FileNotFoundError) as e:
        print(f"goodsched {args.cmd}: {e}", file=sys.stderr)
        return 2
    if isinstance(out, tuple):
        for o in out:
            print(o)
    else:
        print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
