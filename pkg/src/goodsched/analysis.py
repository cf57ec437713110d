"""Adversarial traces, an exact small-instance oracle, and the competitive bound.

Small instances are abstract jobs (release, processing time, absolute
deadline, reward) on identical slots. They map onto engine traces with one
prompt token and ``t_comp / v_token - 1`` output tokens under a constant
cost model, so simulated time equals abstract time.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog, minimize_scalar
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .config import ReplicaSpec, RunConfig
from .core import Request, SloClass, to_us


class TooLarge(ValueError):
    pass


MAX_ORACLE_REQUESTS = 12


# --- competitive bound ------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundParams:
    delta: float
    alpha: float
    beta: float
    gamma: float
    p: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("alpha, beta, gamma must be >= 0")
        if self.alpha + self.beta + self.gamma > 1 + 1e-12:
            raise ValueError("alpha + beta + gamma must be <= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if not 0 < self.p <= 1:
            raise ValueError("p must lie in (0, 1]")


def bound_B(delta, alpha, beta, gamma):
    """delta/(1+delta) * min(alpha/(1+delta), beta/(1+delta), gamma*(1+delta)^3), vectorized."""
    d1 = 1.0 + np.asarray(delta, dtype=float)
    m = np.minimum(np.minimum(np.asarray(alpha) / d1, np.asarray(beta) / d1), np.asarray(gamma) * d1 ** 3)
    return np.asarray(delta) / d1 * m


def bound_value(bp: BoundParams) -> float:
    return float(bp.p * bound_B(bp.delta, bp.alpha, bp.beta, bp.gamma))


def _best_on_grid(deltas, ab, p):
    """Best (value, delta, alpha, beta) with gamma = 1 - alpha - beta over the grid."""
    a, b = ab
    best = (-1.0, 0.0, 0.0, 0.0)
    for d in deltas:
        v = bound_B(d, a, b, 1.0 - a - b)
        i = int(np.argmax(v))
        if v.flat[i] > best[0]:
            best = (float(v.flat[i]), float(d), float(a.flat[i]), float(b.flat[i]))
    return best[0] * p, best[1:]


def _inner_lp(delta: float):
    """Exact max over the simplex at fixed delta, as an LP in (alpha, beta, gamma, t)."""
    d1 = 1.0 + delta
    A = [[-1.0 / d1, 0, 0, 1], [0, -1.0 / d1, 0, 1], [0, 0, -d1 ** 3, 1], [1, 1, 1, 0]]
    res = linprog([0, 0, 0, -1.0], A_ub=A, b_ub=[0, 0, 0, 1], bounds=[(0, None)] * 4,
                  method="highs")
    a, b, g, t = res.x
    return delta / d1 * t, a, b, g


def optimize_bound(p: float = 1.0, grid_resolution: int = 200, delta_max: float = 3.0,
                   fixed_delta: float | None = None):
    """Maximize p * B over delta in (0, delta_max] and the simplex alpha+beta+gamma <= 1.

    B grows in each of alpha, beta, gamma, so the optimum spends the whole budget
    (gamma = 1 - alpha - beta). A full grid locates the basin; a bounded line
    search over delta, solving the inner simplex problem as an LP, then refines
    it (plain coordinate zooming stalls on the ridge the min creates).
    """
    if grid_resolution < 100:
        raise ValueError("grid_resolution must be >= 100")
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    n = grid_resolution
    if fixed_delta is not None:
        deltas = np.array([float(fixed_delta)])
    else:
        deltas = np.linspace(delta_max / n, delta_max, n)
    u = np.linspace(0.0, 1.0, n)
    A, Bm = np.meshgrid(u, u, indexing="ij")
    mask = A + Bm <= 1.0
    val, (d, a, b) = _best_on_grid(deltas, (A[mask], Bm[mask]), p)
    g = max(0.0, 1.0 - a - b)
    if fixed_delta is None:
        step = delta_max / n
        lo, hi = max(1e-9, d - 2 * step), min(delta_max, d + 2 * step)
        res = minimize_scalar(lambda x: -_inner_lp(x)[0], bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-10})
        cand_d = float(res.x)
    else:
        cand_d = float(fixed_delta)
    v2, a2, b2, g2 = _inner_lp(cand_d)
    if p * v2 >= val:
        val, d, a, b, g = p * v2, cand_d, a2, b2, g2
    return float(val), BoundParams(float(d), float(a), float(b), float(g), p)


def analytic_bound_curve(delta):
    """Optimum of B over the simplex at fixed delta: alpha=beta binding with gamma(1+d)^3.

    Equals delta (1+delta)^2 / (2 (1+delta)^4 + 1); used as an independent check.
    """
    d1 = 1.0 + np.asarray(delta, dtype=float)
    return np.asarray(delta) * d1 ** 2 / (2 * d1 ** 4 + 1)


# --- small instances ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SmallRequest:
    id: int
    arrival: float
    t_comp: float
    deadline: float     # absolute
    goodput: float

    def __post_init__(self):
        if self.t_comp <= 0 or self.goodput <= 0 or self.arrival < 0 or self.deadline <= self.arrival:
            raise ValueError(f"invalid small request {self}")


@dataclass(frozen=True)
class SmallInstance:
    n_slots: int
    requests: tuple
    label: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "requests", tuple(self.requests))
        if self.n_slots < 1:
            raise ValueError("need at least one slot")


def edf_adversary(T: float, N: int, M: float) -> SmallInstance:
    """A: [0, T] work T, reward M. B_i arrives at i*delta, needs delta, due (i+1)*delta."""
    if T <= 0 or N < 1 or M <= 0:
        raise ValueError("need T > 0, N >= 1, M > 0")
    d = T / (N + 1)
    reqs = [SmallRequest(0, 0.0, T, T, M)]
    reqs += [SmallRequest(i, i * d, d, (i + 1) * d, 1.0) for i in range(1, N + 1)]
    return SmallInstance(1, tuple(reqs), "edf", {"T": T, "N": N, "M": M, "delta": d})


def sjf_adversary(T: float, N: int, M: float) -> SmallInstance:
    """Same jobs; each B_i must finish within delta of its arrival (shorter than A's remainder)."""
    inst = edf_adversary(T, N, M)
    return SmallInstance(1, inst.requests, "sjf", inst.meta)


def random_instance(rng: np.random.Generator, max_requests: int = 10, max_slots: int = 2,
                    unit: float = 0.1) -> SmallInstance:
    """Times are whole multiples of ``unit`` so engine replay is exact."""
    n = int(rng.integers(1, max_requests + 1))
    slots = int(rng.integers(1, max_slots + 1))
    reqs = []
    for i in range(n):
        a = int(rng.integers(0, 30))
        c = int(rng.integers(2, 16))
        slack = int(rng.integers(0, 2 * c + 1))
        r = float(rng.integers(1, 21))
        reqs.append(SmallRequest(i, round(a * unit, 9), round(c * unit, 9),
                                 round((a + c + slack) * unit, 9), r))
    return SmallInstance(slots, tuple(reqs), "random")


def instance_requests(inst: SmallInstance, v_token: float = 0.1) -> list[Request]:
    """Engine trace: deadline-sensitive, one prompt token, credit carried by output tokens."""
    out = []
    for r in inst.requests:
        iters = int(round(r.t_comp / v_token))
        if iters < 2 or abs(iters * v_token - r.t_comp) > 1e-9:
            raise ValueError(f"t_comp {r.t_comp} is not a multiple (>= 2) of v_token {v_token}")
        lo = iters - 1   # one prefill iteration, then one token per iteration
        out.append(Request(r.id, r.arrival, 1, lo, SloClass.deadline(r.deadline - r.arrival),
                           app_tag="adversary", weights=(0.0, r.goodput / lo)))
    return out


adversary_requests = instance_requests


def instance_config(inst: SmallInstance, v_token: float = 0.1, **kw) -> RunConfig:
    """Constant-time iterations, no admission drops, free preemption, exact lengths."""
    base = dict(B=inst.n_slots, c0=v_token, c_att=0.0, c_lin=0.0, length_source="oracle",
                waiting_time=None, io_bandwidth=float("inf"), delta_iters=1, use_patterns=False,
                replicas=[ReplicaSpec(capacity=inst.n_slots, v_token=v_token)])
    base.update(kw)
    return RunConfig(**base)


def simulate_instance(inst: SmallInstance, policy: str, v_token: float = 0.1, **kw) -> float:
    from .engine import run
    from .metrics import token_goodput
    res = run(instance_requests(inst, v_token), policy, instance_config(inst, v_token, **kw))
    return token_goodput(res)


# --- oracle ----------------------------------------------------------------------------------------

@dataclass
class OracleResult:
    goodput: float
    chosen: tuple
    schedule: dict      # slot -> ordered ids (nonpreemptive mode) or {} (preemptive)


def _feasible_preemptive(jobs, n_slots: int) -> bool:
    """Horn's flow test: preemptive, migratory schedule on identical slots meeting deadlines."""
    if not jobs:
        return True
    rel = [to_us(j.arrival) for j in jobs]
    dl = [to_us(j.deadline) for j in jobs]
    pt = [to_us(j.t_comp) for j in jobs]
    pts = sorted(set(rel) | set(dl))
    n, k = len(jobs), len(pts) - 1
    src, sink = 0, 1 + n + k
    rows, cols, caps = [], [], []
    for i in range(n):
        rows.append(src); cols.append(1 + i); caps.append(pt[i])
        for t in range(k):
            if rel[i] <= pts[t] and pts[t + 1] <= dl[i]:
                rows.append(1 + i); cols.append(1 + n + t); caps.append(pts[t + 1] - pts[t])
    for t in range(k):
        rows.append(1 + n + t); cols.append(sink); caps.append(n_slots * (pts[t + 1] - pts[t]))
    g = csr_matrix((np.asarray(caps, dtype=np.int32), (rows, cols)), shape=(sink + 1, sink + 1))
    return maximum_flow(g, src, sink).flow_value == sum(pt)


def _single_slot_finish(jobs):
    """Earliest finish of every subset run non-preemptively on one slot (inf if infeasible)."""
    n = len(jobs)
    INF = math.inf
    f = [INF] * (1 << n)
    order = [[] for _ in range(1 << n)]
    f[0] = 0
    for mask in range(1, 1 << n):
        best, best_last = INF, -1
        for j in range(n):
            if mask >> j & 1:
                prev = f[mask ^ (1 << j)]
                if prev == INF:
                    continue
                end = max(prev, to_us(jobs[j].arrival)) + to_us(jobs[j].t_comp)
                if end <= to_us(jobs[j].deadline) and end < best:
                    best, best_last = end, j
        f[mask] = best
        if best_last >= 0:
            order[mask] = order[mask ^ (1 << best_last)] + [best_last]
    return f, order


def oracle_schedule(inst: SmallInstance, preemptive: bool = True) -> OracleResult:
    """Maximum total reward of requests finishing by their deadlines (exact).

    ``preemptive=True`` allows preemption and migration between slots at any
    time, which upper-bounds every engine policy. ``preemptive=False`` is the
    per-slot run-to-completion model, solved by bitmask DP.
    """
    reqs = list(inst.requests)
    if len(reqs) > MAX_ORACLE_REQUESTS:
        raise TooLarge(f"{len(reqs)} requests exceed the oracle cap of {MAX_ORACLE_REQUESTS}")
    jobs = [r for r in reqs if r.arrival + r.t_comp <= r.deadline + 1e-12]
    if preemptive:
        return _oracle_preemptive(jobs, inst.n_slots)
    return _oracle_nonpreemptive(jobs, inst.n_slots)


def _oracle_preemptive(jobs, n_slots) -> OracleResult:
    jobs = sorted(jobs, key=lambda j: (-j.goodput, j.id))
    suffix = np.concatenate((np.cumsum([j.goodput for j in jobs][::-1])[::-1], [0.0]))
    best = [0.0, ()]

    def dfs(i, chosen, value):
        if value > best[0]:
            best[0], best[1] = value, tuple(chosen)
        if i == len(jobs) or value + suffix[i] <= best[0]:
            return
        cand = chosen + [jobs[i]]
        if _feasible_preemptive(cand, n_slots):
            dfs(i + 1, cand, value + jobs[i].goodput)
        dfs(i + 1, chosen, value)

    dfs(0, [], 0.0)
    return OracleResult(best[0], tuple(sorted(j.id for j in best[1])), {})


def _oracle_nonpreemptive(jobs, n_slots) -> OracleResult:
    n = len(jobs)
    f, order = _single_slot_finish(jobs)
    full = (1 << n) - 1
    reward = [sum(jobs[j].goodput for j in range(n) if m >> j & 1) for m in range(1 << n)]
    ok = [f[m] != math.inf for m in range(1 << n)]
    # g[s][mask]: best reward using s slots on jobs in mask
    g = [[0.0] * (1 << n)]
    pick = [[0] * (1 << n)]
    for _ in range(n_slots):
        prev = g[-1]
        cur = [0.0] * (1 << n)
        cp = [0] * (1 << n)
        for mask in range(1 << n):
            best, arg = prev[mask], 0
            sub = mask
            while sub:
                if ok[sub]:
                    v = reward[sub] + prev[mask ^ sub]
                    if v > best:
                        best, arg = v, sub
                sub = (sub - 1) & mask
            cur[mask], cp[mask] = best, arg
        g.append(cur)
        pick.append(cp)
    schedule, mask = {}, full
    for s in range(n_slots, 0, -1):
        sub = pick[s][mask]
        schedule[n_slots - s] = [jobs[j].id for j in order[sub]]
        mask ^= sub
    chosen = tuple(sorted(i for ids in schedule.values() for i in ids))
    return OracleResult(g[n_slots][full], chosen, schedule)


def brute_force_goodput(inst: SmallInstance, preemptive: bool = True) -> float:
    """Enumerate every subset (tiny instances only) as a check on the branch-and-bound."""
    jobs = [r for r in inst.requests if r.arrival + r.t_comp <= r.deadline + 1e-12]
    best = 0.0
    for k in range(len(jobs) + 1):
        for sub in itertools.combinations(jobs, k):
            if preemptive:
                feas = _feasible_preemptive(list(sub), inst.n_slots)
            else:
                feas = _oracle_nonpreemptive(list(sub), inst.n_slots).goodput >= sum(j.goodput for j in sub) - 1e-9
            if feas:
                best = max(best, sum(j.goodput for j in sub))
    return best


# --- consolidated report -------------------------------------------------------------------------------

def appendix_report(T: float = 10.0, N: int = 9, M: float = 100.0, seed: int = 0,
                    n_instances: int = 50, grid_resolution: int = 200) -> dict:
    edf = edf_adversary(T, N, M)
    sjf = sjf_adversary(T, N, M)
    edf_g = simulate_instance(edf, "edf")
    sjf_g = simulate_instance(sjf, "sjf_oracle")
    opt_e = oracle_schedule(edf).goodput
    opt_s = oracle_schedule(sjf).goodput
    gmax_e = simulate_instance(edf, "gmax")
    gmax_s = simulate_instance(sjf, "gmax")
    v1, a1 = optimize_bound(1.0, grid_resolution)
    v95, a95 = optimize_bound(0.95, grid_resolution)
    rng = np.random.default_rng(seed)
    ratios = []
    violations = 0
    for _ in range(n_instances):
        inst = random_instance(rng)
        opt = oracle_schedule(inst).goodput
        for pol in ("gmax", "fcfs", "edf", "sjf_oracle", "ltr", "plas"):
            if simulate_instance(inst, pol) > opt + 1e-6:
                violations += 1
        ratios.append(simulate_instance(inst, "gmax") / opt if opt > 0 else 1.0)
    return {
        "T": T, "N": N, "M": M,
        "edf_goodput": edf_g, "sjf_goodput": sjf_g,
        "oracle_edf": opt_e, "oracle_sjf": opt_s,
        "edf_ratio": opt_e / edf_g if edf_g else math.inf,
        "sjf_ratio": opt_s / sjf_g if sjf_g else math.inf,
        "gmax_edf_trace": gmax_e, "gmax_sjf_trace": gmax_s,
        "bound_p1": v1, "bound_p095": v95,
        "bound_p1_inverse": 1.0 / v1, "bound_p095_inverse": 1.0 / v95,
        "argmax": {"p1": a1.__dict__, "p095": a95.__dict__},
        "reference": {"p1": 1 / 8.13, "p095": 1 / 8.557},
        "relative_gap": {"p1": v1 * 8.13 - 1.0, "p095": v95 * 8.557 - 1.0},
        "oracle_violations": violations,
        "gmax_oracle_mean_ratio": float(np.mean(ratios)),
        "instances": n_instances, "seed": seed,
    }
