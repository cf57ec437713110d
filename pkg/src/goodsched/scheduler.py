"""GMAX batch selection, its building blocks, and the baseline policies.

Everything here is a pure function of a queue snapshot: the engine owns all
state and calls in at frame boundaries (or when idle slots can be filled).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .core import ModelReplica, Request, SloKind
from .estimator import LengthBound
from .metrics import GoodputLevel, GoodputSpec
from .patterns import MatchResult, ShareMode, stage_deadline

EPS = 1e-6
TIE_RTOL = 1e-9

# kind codes used by the vectorized analysis
LAT, DDL, CMP, BE = 0, 1, 2, 3
KIND_CODE = {SloKind.LATENCY: LAT, SloKind.DEADLINE: DDL, SloKind.COMPOUND: CMP,
             SloKind.BEST_EFFORT: BE}


class ExpiredSlo(Exception):
    """The request can no longer meet its SLO (t_rem <= 0)."""


class EmptyQueue(ValueError):
    pass


class PolicyKind(str, Enum):
    GMAX = "gmax"
    FCFS = "fcfs"
    EDF = "edf"
    SJF_ORACLE = "sjf_oracle"
    LTR_PREDICTED = "ltr"
    PLAS = "plas"

    @property
    def preemptive(self) -> bool:
        return self is not PolicyKind.FCFS


@dataclass
class RequestEstimate:
    key: int
    len_rem: float
    t_gen: float
    t_rem: float
    goodput: float
    priority: float
    frames_waited: int = 0
    replica_id: int = 0
    context_len: int = 0
    arrival: float = 0.0
    expired: bool = False

    @property
    def bw(self) -> float:
        return self.t_gen / self.t_rem if self.t_rem > 0 else math.inf

    def bw_frame(self, delta: float) -> float:
        return self.bw * delta

    def goodput_frame(self, delta: float) -> float:
        if self.t_rem <= 0:
            return 0.0 if self.goodput == 0 else math.inf
        return self.goodput / self.t_rem * delta


@dataclass
class BatchPlan:
    selected: list
    preempted: list = field(default_factory=list)
    frame_index: int = 0

    def __post_init__(self):
        if set(self.selected) & set(self.preempted):
            raise ValueError("a request cannot be both selected and preempted")


@dataclass
class StageContext:
    """Current stage of a compound request, as the scheduler sees it.

    ``len_rem`` and ``reward`` are aggregated over every LLM subrequest of
    the stage; ``pattern`` is the matched history used for the sub-deadline.
    """

    index: int
    stage_start: float
    len_rem: float
    reward: float
    pattern: object = None
    mode: ShareMode = ShareMode.CUMULATIVE


# --- analysis ----------------------------------------------------------------

def latency_on_time(now, t0, tbt, v, g, upper, extra=0):
    """How many of tokens g..upper-1 can still meet arrival+ttft+i*tbt (= t0 + i*tbt)
    if the request is served continuously from ``now`` at ``v`` seconds per token."""
    now, t0, tbt, v, g, upper, extra = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (now, t0, tbt, v, g, upper, extra)))
    A = now - t0 + (1.0 + extra - g) * v
    slope = tbt - v
    safe = np.where(slope == 0, 1.0, slope)
    # slope > 0: lateness shrinks with i, count the tail
    i_min = np.maximum(g, np.ceil(A / safe - 1e-9))
    pos = np.maximum(0.0, upper - i_min)
    # slope < 0: lateness grows with i, count the head
    i_max = np.minimum(upper - 1, np.floor(A / safe + 1e-9))
    neg = np.maximum(0.0, i_max - g + 1)
    flat = np.where(A <= 0, upper - g, 0.0)
    out = np.where(slope > 0, pos, np.where(slope < 0, neg, flat))
    return np.maximum(out, 0.0)


def analyze_batch(kind, len_rem, now, v, *, reward, upper=None, generated=None, t0=None,
                  tbt=None, deadline=None, final_deadline=None, extra=None, violated=None,
                  level: GoodputLevel = GoodputLevel.TOKEN, feasibility_filter=False,
                  eps: float = EPS):
    """Vectorized analysis. Returns (goodput, t_gen, t_rem, priority, expired).

    ``reward`` is the on-time credit: per-token weight for latency requests,
    the full (stage-aggregated) credit otherwise. ``deadline`` is the absolute
    time the request (or compound stage) is due; ``final_deadline`` is the
    compound's overall deadline used as the fallback.
    """
    kind = np.asarray(kind)
    n = len(kind)
    z = np.zeros(n)
    len_rem = np.asarray(len_rem, dtype=float)
    v = np.broadcast_to(np.asarray(v, dtype=float), (n,))
    reward = np.asarray(reward, dtype=float)
    upper = z if upper is None else np.asarray(upper, dtype=float)
    generated = z if generated is None else np.asarray(generated, dtype=float)
    t0 = z if t0 is None else np.asarray(t0, dtype=float)
    tbt = z if tbt is None else np.asarray(tbt, dtype=float)
    deadline = z if deadline is None else np.asarray(deadline, dtype=float)
    final_deadline = deadline if final_deadline is None else np.asarray(final_deadline, dtype=float)
    extra = z if extra is None else np.asarray(extra, dtype=float)
    violated = np.zeros(n, dtype=bool) if violated is None else np.asarray(violated, dtype=bool)

    t_gen = len_rem * v
    is_lat = kind == LAT
    is_cmp = kind == CMP
    t_rem = np.where(is_lat, t0 + upper * tbt - now, deadline - now)
    final_rem = final_deadline - now
    # compound sub-deadlines are advisory: a missed stage budget falls back to the final one
    t_rem = np.where(is_cmp & (t_rem <= 0) & (final_rem > 0), final_rem, t_rem)
    expired = np.where(is_cmp, final_rem <= 0, t_rem <= 0)

    if np.any(is_lat):
        cnt = np.zeros(n)
        cnt[is_lat] = latency_on_time(now, t0[is_lat], tbt[is_lat], v[is_lat], generated[is_lat],
                                      upper[is_lat], extra[is_lat])
    else:
        cnt = z
    if level is GoodputLevel.REQUEST:
        lat_g = np.where(~violated & (cnt >= upper - generated), 1.0, 0.0)
        other_g = np.ones(n)
    else:
        lat_g = reward * cnt
        other_g = reward
    goodput = np.where(is_lat, lat_g, np.where(kind == BE, 0.0, other_g))
    goodput = np.where(expired, 0.0, goodput)
    if feasibility_filter:
        goodput = np.where(~is_lat & (t_gen > np.maximum(t_rem, 0.0)), 0.0, goodput)
    priority = goodput / (t_gen + eps)
    return goodput, t_gen, t_rem, priority, expired


def analyze(req: Request, bound: LengthBound, now: float, v_token: float, *,
            spec: GoodputSpec = GoodputSpec(), stage: StageContext | None = None,
            replica_id: int = 0, frames_waited: int = 0, prefill_left: int = 0,
            prefill_chunk: int = 512, violated: bool = False, key: int | None = None,
            feasibility_filter: bool = False, eps: float = EPS) -> RequestEstimate:
    """Bandwidth and priority of one request. Raises ExpiredSlo when t_rem <= 0."""
    if bound.total_upper < req.generated:
        raise ValueError("bound below generated tokens")
    kind = req.kind
    w_in, w_out = spec.weights_for(req.weights)
    len_rem = bound.total_upper - req.generated
    extra = math.ceil(prefill_left / prefill_chunk)  # prefill iterations emit no token
    kw = dict(upper=[bound.total_upper], generated=[req.generated], extra=[extra],
              violated=[violated])
    if kind is SloKind.LATENCY:
        kw.update(reward=[w_out], t0=[req.arrival + req.slo.ttft], tbt=[req.slo.tbt])
    elif kind is SloKind.COMPOUND:
        final = req.arrival + req.slo.e2el
        if stage is None:
            dl = final
            reward = w_in * req.input_len + w_out * bound.total_upper
        else:
            pattern = stage.pattern.pattern if isinstance(stage.pattern, MatchResult) else stage.pattern
            dl = stage_deadline(pattern, stage.index, req.arrival, stage.stage_start,
                                req.slo.e2el, stage.mode)
            len_rem = stage.len_rem
            reward = stage.reward
        kw.update(reward=[reward], deadline=[dl], final_deadline=[final])
    else:
        kw.update(reward=[w_in * req.input_len + w_out * bound.total_upper],
                  deadline=[req.arrival + req.slo.e2el])
    g, t_gen, t_rem, prio, expired = analyze_batch(
        np.array([KIND_CODE[kind]]), [len_rem], now, v_token, level=spec.level,
        feasibility_filter=feasibility_filter, eps=eps, **kw)
    if expired[0]:
        raise ExpiredSlo(f"request {req.id}: no time left for its SLO")
    return RequestEstimate(key=req.id if key is None else key, len_rem=float(len_rem),
                           t_gen=float(t_gen[0]), t_rem=float(t_rem[0]), goodput=float(g[0]),
                           priority=float(prio[0]), frames_waited=frames_waited,
                           replica_id=replica_id, context_len=req.input_len + req.generated,
                           arrival=req.arrival)


def demoted(req: Request, bound: LengthBound, now: float, v_token: float, **kw) -> RequestEstimate:
    """Estimate for a request whose SLO is already lost: zero goodput, still schedulable."""
    len_rem = bound.total_upper - req.generated
    t_gen = len_rem * v_token
    return RequestEstimate(key=kw.get("key", req.id), len_rem=float(len_rem), t_gen=t_gen,
                           t_rem=0.0, goodput=0.0, priority=0.0,
                           frames_waited=kw.get("frames_waited", 0),
                           replica_id=kw.get("replica_id", 0),
                           context_len=req.input_len + req.generated, arrival=req.arrival,
                           expired=True)


def starvation_inflate(est: RequestEstimate, delta_starve: float, eps: float = EPS) -> RequestEstimate:
    if delta_starve < 0:
        raise ValueError("delta_starve must be >= 0")
    if est.frames_waited == 0 or delta_starve == 0:
        return est
    g = est.goodput + delta_starve * est.frames_waited
    return replace(est, goodput=g, priority=g / (est.t_gen + eps))


def blend_fairness(priority, fair_score, f: float):
    if not 0.0 <= f <= 1.0:
        raise ValueError("f must lie in [0, 1]")
    return (1.0 - f) * priority + f * fair_score


# --- grouping ------------------------------------------------------------------

def select_window(priority, context, arrival, uid, B: int, p: float) -> np.ndarray:
    """Indices of the best length-contiguous group (array form of select_group)."""
    priority = np.asarray(priority, dtype=float)
    n = len(priority)
    if n == 0:
        raise EmptyQueue("nothing to schedule")
    if B < 1:
        raise ValueError("B must be >= 1")
    if not 0.0 < p <= 1.0:
        raise ValueError("p must lie in (0, 1]")
    if n > B:
        bp = np.partition(priority, n - B)[n - B]
    else:
        bp = priority.min()
    cand = np.flatnonzero(priority >= p * bp)
    # only candidates need the sort keys; usually about B of them
    context = np.array([context[i] for i in cand])
    arrival = np.array([arrival[i] for i in cand], dtype=float)
    uid = np.array([uid[i] for i in cand])
    order = np.lexsort((uid, arrival, context))
    cand, arrival, uid = cand[order], arrival[order], uid[order]
    pr = priority[cand]
    w = min(B, len(cand))
    c = np.concatenate(([0.0], np.cumsum(pr)))
    scores = c[w:] - c[:-w]
    best = scores.max()
    tied = np.flatnonzero(scores >= best - TIE_RTOL * max(abs(best), 1e-300))
    if len(tied) > 1:
        tied = tied[np.lexsort((uid[tied], arrival[tied]))]
    start = int(tied[0])
    return cand[start:start + w]


class _Field:
    """Lazy per-index attribute view, so select_window reads only what it needs."""

    def __init__(self, items, name):
        self.items, self.name = items, name

    def __getitem__(self, i):
        return getattr(self.items[i], self.name)


def select_group(queue: list[RequestEstimate], B: int, p: float, frame_index: int = 0) -> BatchPlan:
    """Cutoff-filter by priority, sort by context length, pick the best window of B."""
    if not queue:
        raise EmptyQueue("nothing to schedule")
    pr = np.fromiter((e.priority for e in queue), dtype=float, count=len(queue))
    idx = select_window(pr, _Field(queue, "context_len"), _Field(queue, "arrival"),
                        _Field(queue, "key"), B, p)
    return BatchPlan([queue[i].key for i in idx], [], frame_index)


def preemption_check(running, group, estimates: dict, kv_sizes: dict, io_bandwidth: float,
                     gen_speed: float, delta_pmtn: float, frame_seconds: float = 1.0,
                     capacity: int | None = None, frame_index: int = 0) -> BatchPlan:
    """Decide which proposed swaps pay for their KV-cache movement.

    Free slots are filled without any test. Each remaining newcomer (highest
    priority first) is paired with the weakest surviving runner; the swap
    happens only if the frame-goodput gain beats the stall loss and the
    goodput ratio clears 1 + delta_pmtn.
    """
    if delta_pmtn < 0:
        raise ValueError("delta_pmtn must be >= 0")
    running = list(running.selected if isinstance(running, BatchPlan) else running)
    group = list(group.selected if isinstance(group, BatchPlan) else group)
    cap = capacity if capacity is not None else max(len(running), len(group))
    run_set = set(running)
    grp_set = set(group)

    def rank(k):
        return (-estimates[k].priority, k)

    incoming = sorted((k for k in group if k not in run_set), key=rank)
    outgoing = sorted((k for k in running if k not in grp_set),
                      key=lambda k: (estimates[k].priority, -k))
    free = max(0, cap - len(running))
    admitted = incoming[:free]
    preempted = []
    for r_in, r_out in zip(incoming[free:], outgoing):
        e_in, e_out = estimates[r_in], estimates[r_out]
        stall = kv_sizes.get(r_out, 0) / io_bandwidth if io_bandwidth > 0 else math.inf
        loss = stall * gen_speed
        gain = e_in.goodput_frame(frame_seconds) - e_out.goodput_frame(frame_seconds)
        if e_out.goodput > 0:
            ratio = e_in.goodput / e_out.goodput
        else:
            ratio = math.inf if e_in.goodput > 0 else 1.0
        if gain > loss and ratio > 1.0 + delta_pmtn:
            preempted.append(r_out)
            admitted.append(r_in)
    gone = set(preempted)
    selected = [k for k in running if k not in gone] + admitted
    return BatchPlan(selected, preempted, frame_index)


# --- multi-model -----------------------------------------------------------------

def sample_replicas(n_replicas: int, K: int, rng: np.random.Generator) -> tuple[int, ...]:
    if not 1 <= K <= n_replicas:
        raise ValueError(f"K={K} outside 1..{n_replicas}")
    if K == n_replicas:
        return tuple(range(n_replicas))
    return tuple(sorted(int(i) for i in rng.choice(n_replicas, size=K, replace=False)))


def expand_multi_model(req: Request, bound: LengthBound, now: float, replicas: list[ModelReplica],
                       K: int, rng: np.random.Generator | None = None, **kw) -> list[RequestEstimate]:
    """One replica-specific estimate per sampled replica (shared key, distinct replica_id)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    chosen = sample_replicas(len(replicas), K, rng)
    return [analyze(req, bound, now, replicas[i].v_token, replica_id=replicas[i].replica_id, **kw)
            for i in chosen]


def remove_siblings(queue: list[RequestEstimate], assigned_key) -> list[RequestEstimate]:
    return [e for e in queue if e.key != assigned_key]


# --- baselines --------------------------------------------------------------------

@dataclass
class JobView:
    """What a baseline policy may look at. ``true_remaining`` is oracle-only."""

    key: int
    arrival: float
    deadline: float
    true_remaining: float
    predicted_remaining: float
    attained: float


def policy_order(policy: PolicyKind | str, queue: list[JobView], B: int, now: float = 0.0) -> list:
    """Keys of the first (at most) B jobs in the policy's order."""
    if not queue:
        raise EmptyQueue("nothing to schedule")
    policy = PolicyKind(policy)
    if policy is PolicyKind.FCFS:
        key = lambda j: (j.arrival, j.key)
    elif policy is PolicyKind.EDF:
        # equal deadlines: less predicted work first
        key = lambda j: (j.deadline, j.predicted_remaining, j.arrival, j.key)
    elif policy is PolicyKind.SJF_ORACLE:
        key = lambda j: (j.true_remaining, j.arrival, j.key)
    elif policy is PolicyKind.LTR_PREDICTED:
        key = lambda j: (j.predicted_remaining, j.arrival, j.key)
    elif policy is PolicyKind.PLAS:
        key = lambda j: (j.attained, j.arrival, j.key)
    else:
        raise ValueError("GMAX is not an ordering policy; use select_group")
    return [j.key for j in sorted(queue, key=key)[:B]]


# --- cutoff adaptation ----------------------------------------------------------------

@dataclass
class CutoffAdapter:
    """Epsilon-greedy choice of p over a fixed grid, judged on trailing-window goodput."""

    grid: tuple = (0.8, 0.9, 0.95, 1.0)
    epsilon: float = 0.1
    window: int = 100
    seed: int = 0
    arm: int = 2
    _frames: int = 0
    _acc: float = 0.0
    _sum: list = field(default_factory=list)
    _cnt: list = field(default_factory=list)

    def __post_init__(self):
        self._rng = np.random.default_rng(self.seed)
        self._sum = [0.0] * len(self.grid)
        self._cnt = [0] * len(self.grid)

    @property
    def p(self) -> float:
        return self.grid[self.arm]

    def record(self, frame_goodput: float) -> None:
        self._acc += frame_goodput
        self._frames += 1
        if self._frames < self.window:
            return
        self._sum[self.arm] += self._acc / self._frames
        self._cnt[self.arm] += 1
        self._acc, self._frames = 0.0, 0
        untried = [i for i, c in enumerate(self._cnt) if c == 0]
        if untried:
            self.arm = untried[0]
        elif self._rng.random() < self.epsilon:
            self.arm = int(self._rng.integers(len(self.grid)))
        else:
            means = [s / c for s, c in zip(self._sum, self._cnt)]
            self.arm = int(np.argmax(means))
