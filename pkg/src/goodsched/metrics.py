"""Goodput and latency accounting over a simulated run."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import SloKind, to_us


class GoodputLevel(str, Enum):
    TOKEN = "token"
    REQUEST = "request"


@dataclass(frozen=True)
class GoodputSpec:
    """Which goodput the scheduler optimizes and the metrics report.

    ``weights=None`` means every request's own (w_in, w_out) is used.
    """

    level: GoodputLevel = GoodputLevel.TOKEN
    weights: tuple[float, float] | None = None

    def __post_init__(self):
        object.__setattr__(self, "level", GoodputLevel(self.level))
        if self.weights is not None:
            w_in, w_out = self.weights
            if w_in < 0 or w_out < 0 or (w_in == 0 and w_out == 0):
                raise ValueError("goodput weights must be >= 0 and not both zero")

    def weights_for(self, rec_weights) -> tuple[float, float]:
        return tuple(self.weights) if self.weights is not None else tuple(rec_weights)

    def to_dict(self) -> dict:
        return {"level": self.level.value,
                "weights": None if self.weights is None else list(self.weights)}

    @classmethod
    def from_dict(cls, d: dict) -> GoodputSpec:
        w = d.get("weights")
        return cls(GoodputLevel(d.get("level", "token")), None if w is None else tuple(w))


# --- per-record helpers --------------------------------------------------------

def token_deadlines_us(arrival: float, ttft: float, tbt: float, n: int) -> np.ndarray:
    """Per-token deadlines in microseconds, token i due at arrival + ttft + i*tbt."""
    return to_us(arrival) + to_us(ttft) + to_us(tbt) * np.arange(n, dtype=np.int64)


def on_time_tokens(rec) -> int:
    toks = rec.tokens_us
    if toks is None or len(toks) == 0:
        return 0
    dl = token_deadlines_us(rec.arrival, rec.slo.ttft, rec.slo.tbt, len(toks))
    return int(np.count_nonzero(toks <= dl))


def deadline_us(rec) -> int:
    return to_us(rec.arrival) + to_us(rec.slo.e2el)


def slo_met(rec) -> bool:
    """Strict request-level attainment."""
    if rec.dropped or rec.completion_us is None:
        return False
    kind = rec.kind
    if kind is SloKind.LATENCY:
        return len(rec.tokens_us) == rec.output_len and on_time_tokens(rec) == rec.output_len
    if kind is SloKind.BEST_EFFORT:
        return False
    return rec.completion_us <= deadline_us(rec)


def record_goodput(rec, spec: GoodputSpec = GoodputSpec()) -> float:
    if spec.level is GoodputLevel.REQUEST:
        return 1.0 if slo_met(rec) else 0.0
    w_in, w_out = spec.weights_for(rec.weights)
    kind = rec.kind
    if kind is SloKind.LATENCY:
        return w_out * on_time_tokens(rec)
    if kind is SloKind.BEST_EFFORT or rec.dropped or rec.completion_us is None:
        return 0.0
    if rec.completion_us > deadline_us(rec):
        return 0.0
    if kind is SloKind.COMPOUND:
        return float(sum(w_in * s.input_len + w_out * s.output_len for s in rec.subs))
    return w_in * rec.input_len + w_out * rec.output_len


def full_credit(rec, spec: GoodputSpec = GoodputSpec()) -> float:
    """Largest goodput the record could have earned."""
    if spec.level is GoodputLevel.REQUEST:
        return 0.0 if rec.kind is SloKind.BEST_EFFORT else 1.0
    w_in, w_out = spec.weights_for(rec.weights)
    if rec.kind is SloKind.LATENCY:
        return w_out * rec.output_len
    if rec.kind is SloKind.BEST_EFFORT:
        return 0.0
    if rec.kind is SloKind.COMPOUND:
        return float(sum(w_in * s.input_len + w_out * s.output_len for s in rec.subs))
    return w_in * rec.input_len + w_out * rec.output_len


# --- run-level metrics -----------------------------------------------------------

def token_goodput(result, spec: GoodputSpec = GoodputSpec()) -> float:
    if spec.level is GoodputLevel.REQUEST:
        return float(request_goodput(result))
    return float(sum(record_goodput(r, spec) for r in result.records))


def request_goodput(result) -> int:
    return sum(1 for r in result.records if slo_met(r))


def percentile(samples, q: float) -> float | None:
    """Nearest-rank percentile (q in [0, 100])."""
    if len(samples) == 0:
        return None
    x = np.sort(np.asarray(samples, dtype=float))
    rank = max(1, int(np.ceil(q / 100.0 * len(x))))
    return float(x[rank - 1])


def latency_samples(result) -> dict[str, np.ndarray]:
    ttft, tbt, e2el = [], [], []
    for r in result.records:
        if r.kind is SloKind.COMPOUND:
            for s in r.subs:
                if len(s.tokens_us):
                    ttft.append((s.tokens_us[0] - s.release_us) / 1e6)
                    if len(s.tokens_us) > 1:
                        tbt.append(np.diff(s.tokens_us) / 1e6)
        elif r.tokens_us is not None and len(r.tokens_us):
            ttft.append((r.tokens_us[0] - to_us(r.arrival)) / 1e6)
            if len(r.tokens_us) > 1:
                tbt.append(np.diff(r.tokens_us) / 1e6)
        if r.completion_us is not None and not r.dropped:
            e2el.append((r.completion_us - to_us(r.arrival)) / 1e6)
    return {"ttft": np.asarray(ttft), "tbt": np.concatenate(tbt) if tbt else np.array([]),
            "e2el": np.asarray(e2el)}


def latency_stats(result) -> dict[str, float | None]:
    out = {}
    for name, xs in latency_samples(result).items():
        out[f"{name}_p50"] = percentile(xs, 50)
        out[f"{name}_p95"] = percentile(xs, 95)
    return out


@dataclass
class GoodputReport:
    policy: str
    total_goodput: float
    by_class: dict = field(default_factory=dict)
    attainment: float = 0.0
    latency: dict = field(default_factory=dict)
    throughput: float = 0.0
    drops: int = 0
    preemptions: int = 0
    n_requests: int = 0

    def to_dict(self) -> dict:
        return {"policy": self.policy, "total_goodput": self.total_goodput,
                "by_class": dict(self.by_class), "attainment": self.attainment,
                "latency": dict(self.latency), "throughput": self.throughput,
                "drops": self.drops, "preemptions": self.preemptions,
                "n_requests": self.n_requests}

    def rows(self) -> list[tuple[str, str, float | None]]:
        rows = [(self.policy, "total_goodput", self.total_goodput),
                (self.policy, "attainment", self.attainment),
                (self.policy, "throughput", self.throughput),
                (self.policy, "drops", self.drops),
                (self.policy, "preemptions", self.preemptions),
                (self.policy, "n_requests", self.n_requests)]
        rows += [(self.policy, f"goodput_{k}", v) for k, v in sorted(self.by_class.items())]
        rows += [(self.policy, k, v) for k, v in sorted(self.latency.items())]
        return rows

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["policy", "metric", "value"])
        w.writerows(self.rows())
        return buf.getvalue()


def goodput_report(result, spec: GoodputSpec = GoodputSpec()) -> GoodputReport:
    by_class: dict[str, float] = {k.value: 0.0 for k in SloKind}
    for r in result.records:
        by_class[r.kind.value] += record_goodput(r, spec)
    n = len(result.records)
    gen = sum(r.tokens_generated for r in result.records)
    sim_s = result.sim_time_us / 1e6
    return GoodputReport(
        policy=result.policy,
        total_goodput=float(sum(by_class.values())),
        by_class=by_class,
        attainment=request_goodput(result) / n if n else 0.0,
        latency=latency_stats(result),
        throughput=gen / sim_s if sim_s > 0 else 0.0,
        drops=sum(1 for r in result.records if r.dropped),
        preemptions=sum(r.preemptions for r in result.records),
        n_requests=n,
    )
