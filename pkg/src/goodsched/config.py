"""Run configuration: one dataclass, stored as JSON."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields

from .core import ConfigError
from .metrics import GoodputSpec
from .patterns import ShareMode
from .scheduler import PolicyKind


@dataclass
class ReplicaSpec:
    capacity: int | None = None     # None -> RunConfig.B
    slowdown: float = 1.0
    v_token: float | None = None    # None -> singleton cost-model latency


@dataclass
class RunConfig:
    policy: str = "gmax"
    B: int = 16
    p: float = 0.95
    delta_iters: int = 50
    delta_starve: float = 1.0
    delta_pmtn: float = 0.1
    f: float = 0.0
    K: int | None = None            # replicas sampled per request; None -> all
    q: float = 0.95
    waiting_time: float | None = 5.0    # None disables admission drops
    c0: float = 2e-3
    c_att: float = 0.5e-6
    c_lin: float = 0.05e-3
    prefill_chunk: int = 512
    io_bandwidth: float = 1e6       # tokens/s for KV swap on preemption
    replicas: list = field(default_factory=lambda: [ReplicaSpec()])
    seed: int = 0
    goodput: GoodputSpec = field(default_factory=GoodputSpec)
    slo_scale: float = 1.0
    length_source: str = "qrf"      # qrf | oracle
    refine_interval: int = 50
    subdeadline_mode: str = "cumulative"
    use_patterns: bool = True
    adapt_p: bool = False
    feasibility_filter: bool = False
    eps: float = 1e-6

    def __post_init__(self):
        self.replicas = [r if isinstance(r, ReplicaSpec) else ReplicaSpec(**r) for r in self.replicas]
        if isinstance(self.goodput, dict):
            self.goodput = GoodputSpec.from_dict(self.goodput)
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        try:
            PolicyKind(self.policy)
            ShareMode(self.subdeadline_mode)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        need(self.B >= 1, "B must be >= 1")
        need(0 < self.p <= 1, "p must lie in (0, 1]")
        need(self.delta_iters >= 1, "delta_iters must be >= 1")
        need(self.delta_starve >= 0 and self.delta_pmtn >= 0, "deltas must be >= 0")
        need(0 <= self.f <= 1, "f must lie in [0, 1]")
        need(0 < self.q < 1, "q must lie in (0, 1)")
        need(self.waiting_time is None or self.waiting_time > 0, "waiting_time must be positive")
        need(min(self.c0, self.c_att, self.c_lin) >= 0, "cost coefficients must be >= 0")
        need(self.c0 + self.c_lin > 0, "iterations must take positive time")
        need(self.prefill_chunk >= 1, "prefill_chunk must be >= 1")
        need(self.io_bandwidth > 0, "io_bandwidth must be positive")
        need(len(self.replicas) >= 1, "need at least one replica")
        for r in self.replicas:
            need(r.slowdown > 0, "replica slowdown must be positive")
            need(r.capacity is None or r.capacity >= 1, "replica capacity must be >= 1")
        need(self.K is None or 1 <= self.K <= len(self.replicas), "K outside 1..len(replicas)")
        need(self.slo_scale > 0, "slo_scale must be positive")
        need(self.length_source in ("qrf", "oracle"), "length_source must be qrf or oracle")
        need(self.refine_interval >= 1, "refine_interval must be >= 1")
        need(self.eps > 0, "eps must be positive")

    @property
    def policy_kind(self) -> PolicyKind:
        return PolicyKind(self.policy)

    def to_dict(self) -> dict:
        d = {}
        for f_ in fields(self):
            v = getattr(self, f_.name)
            if f_.name == "replicas":
                v = [asdict(r) for r in v]
            elif f_.name == "goodput":
                v = v.to_dict()
            elif isinstance(v, float) and math.isinf(v):
                v = "inf"
            d[f_.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {f_.name for f_ in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        d = {k: (float("inf") if v == "inf" else v) for k, v in d.items()}
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    def with_(self, **kw) -> RunConfig:
        d = self.to_dict()
        d.update(kw)
        return RunConfig.from_dict(d)
