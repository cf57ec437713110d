"""Discrete-event simulator of batched LLM serving.

The clock is integer microseconds. Replicas execute iterations in
*segments*: runs of iterations with a fixed batch that end at the next frame
boundary, the next request completion, or the end of a prefill step, so a
segment's token timestamps are computed in one vectorized step.
"""

from __future__ import annotations

import functools
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig
from .core import (InvalidTrace, NodeKind, Request, RequestState, SloKind, to_s, to_us,
                   validate_request)
from .estimator import (DEFAULT_REFINE_INTERVAL, FeatureVector, ForestParams, LengthBound,
                        QuantileForest, content_hint, fit_forest, refinement_rows)
from .metrics import GoodputLevel
from .patterns import NoMatch, OversizedPattern, PatternGraph, PatternStore, PNode, ShareMode, \
    stage_deadline
from .scheduler import (BE, CMP, DDL, KIND_CODE, LAT, CutoffAdapter, JobView, PolicyKind,
                        RequestEstimate, analyze_batch, blend_fairness, policy_order,
                        preemption_check, sample_replicas, select_window)

ITER, TOOL, ARRIVAL = 0, 1, 2   # tie order of simultaneous events


@dataclass(frozen=True)
class CostModel:
    c0: float = 2e-3
    c_att: float = 0.5e-6
    c_lin: float = 0.05e-3
    prefill_chunk: int = 512

    def __post_init__(self):
        if min(self.c0, self.c_att, self.c_lin) < 0:
            raise ValueError("cost coefficients must be >= 0")
        if self.c0 + self.c_lin <= 0:
            raise ValueError("a nonempty batch must take positive time")
        if self.prefill_chunk < 1:
            raise ValueError("prefill_chunk must be >= 1")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> CostModel:
        return cls(cfg.c0, cfg.c_att, cfg.c_lin, cfg.prefill_chunk)


def iteration_latency(cm: CostModel, batch) -> float:
    """Seconds for one iteration over ``batch`` (a list of context lengths)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return cm.c0 + cm.c_att * max(batch) + cm.c_lin * len(batch)


# --- results ------------------------------------------------------------------------

@dataclass
class SubRecord:
    node: int
    model: str
    input_len: int
    output_len: int
    release_us: int
    tokens_us: np.ndarray
    done_us: int | None = None


@dataclass
class RequestRecord:
    id: int
    kind: SloKind
    arrival: float
    slo: object
    input_len: int
    output_len: int
    weights: tuple
    app_tag: str
    tokens_us: np.ndarray | None = None
    subs: list = field(default_factory=list)
    completion_us: int | None = None
    dropped: bool = False
    drop_us: int | None = None
    preemptions: int = 0
    frames_waited: int = 0

    @property
    def tokens_generated(self) -> int:
        if self.kind is SloKind.COMPOUND:
            return sum(len(s.tokens_us) for s in self.subs)
        return 0 if self.tokens_us is None else len(self.tokens_us)

    @property
    def ttft(self) -> float | None:
        toks = self.subs[0].tokens_us if self.kind is SloKind.COMPOUND and self.subs else self.tokens_us
        if toks is None or len(toks) == 0:
            return None
        return (int(toks[0]) - to_us(self.arrival)) / 1e6

    def to_dict(self) -> dict:
        d = {"id": self.id, "type": self.kind.value, "arrival_s": self.arrival,
             "slo": self.slo.to_dict(), "input_len": self.input_len,
             "output_len": self.output_len, "weights": list(self.weights),
             "app_tag": self.app_tag, "completion_us": self.completion_us,
             "dropped": self.dropped, "drop_us": self.drop_us,
             "preemptions": self.preemptions, "frames_waited": self.frames_waited}
        if self.kind is SloKind.COMPOUND:
            d["subs"] = [{"node": s.node, "model": s.model, "input_len": s.input_len,
                          "output_len": s.output_len, "release_us": s.release_us,
                          "done_us": s.done_us, "tokens_us": s.tokens_us.tolist()}
                         for s in self.subs]
        else:
            d["tokens_us"] = self.tokens_us.tolist()
        return d


@dataclass
class SimResult:
    policy: str
    records: list
    sim_time_us: int = 0
    frames: list = field(default_factory=list)   # (t_us, replica, ((req, node), ...))
    token_advances: int = 0
    idle_violations: int = 0
    max_frames_waited: int = 0
    config: dict = field(default_factory=dict)

    def to_dict(self, include_frames: bool = True) -> dict:
        d = {"policy": self.policy, "sim_time_us": self.sim_time_us,
             "token_advances": self.token_advances, "idle_violations": self.idle_violations,
             "max_frames_waited": self.max_frames_waited, "config": self.config,
             "records": [r.to_dict() for r in self.records]}
        if include_frames:
            d["frames"] = [[t, rep, [list(k) for k in keys]] for t, rep, keys in self.frames]
        return d

    def to_json(self, include_frames: bool = True) -> str:
        return json.dumps(self.to_dict(include_frames), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> SimResult:
        from .core import SloClass
        recs = []
        for r in d["records"]:
            rec = RequestRecord(r["id"], SloKind(r["type"]), r["arrival_s"],
                                SloClass.from_dict(r["type"], r["slo"]), r["input_len"],
                                r["output_len"], tuple(r["weights"]), r["app_tag"],
                                completion_us=r["completion_us"], dropped=r["dropped"],
                                drop_us=r["drop_us"], preemptions=r["preemptions"],
                                frames_waited=r.get("frames_waited", 0))
            if "subs" in r:
                rec.subs = [SubRecord(s["node"], s["model"], s["input_len"], s["output_len"],
                                      s["release_us"], np.asarray(s["tokens_us"], dtype=np.int64),
                                      s["done_us"]) for s in r["subs"]]
            else:
                rec.tokens_us = np.asarray(r["tokens_us"], dtype=np.int64)
            recs.append(rec)
        frames = [(t, rep, tuple(tuple(k) for k in keys)) for t, rep, keys in d.get("frames", [])]
        return cls(d["policy"], recs, d["sim_time_us"], frames, d["token_advances"],
                   d["idle_violations"], d.get("max_frames_waited", 0), d.get("config", {}))

    @classmethod
    def from_json(cls, s: str) -> SimResult:
        return cls.from_dict(json.loads(s))


# --- runtime state ------------------------------------------------------------------------

class Job:
    """One schedulable LLM invocation (a single request or one compound node)."""

    __slots__ = ("uid", "rid", "node", "req", "kind", "input_len", "output_len", "app_tag",
                 "model", "stage", "release_us", "prefill_left", "generated", "chunks", "state",
                 "scheduled", "frames_waited", "replica", "bound", "median", "preemptions",
                 "allowed", "violated", "comp", "done_us", "w_in", "w_out")

    def __init__(self, uid, req, node, input_len, output_len, model, stage, release_us, comp,
                 allowed, weights):
        self.uid = uid
        self.rid = req.id
        self.node = node
        self.req = req
        self.kind = req.kind
        self.input_len = input_len
        self.output_len = output_len
        self.app_tag = req.app_tag
        self.model = model
        self.stage = stage
        self.release_us = release_us
        self.prefill_left = input_len
        self.generated = 0
        self.chunks = []
        self.state = RequestState.QUEUED
        self.scheduled = False
        self.frames_waited = 0
        self.replica = None
        self.bound = None
        self.median = None
        self.preemptions = 0
        self.allowed = allowed
        self.violated = False
        self.comp = comp
        self.done_us = None
        self.w_in, self.w_out = weights

    @property
    def key(self):
        return (self.rid, self.node)

    @property
    def ctx(self) -> int:
        return self.input_len + self.generated

    def tokens(self) -> np.ndarray:
        if not self.chunks:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(self.chunks).astype(np.int64)


class Compound:
    __slots__ = ("req", "graph", "stage", "stage_start_us", "remaining", "jobs", "stage_times",
                 "pattern", "done_us", "dropped", "drop_us", "node_us", "allowed", "attained",
                 "scheduled")

    def __init__(self, req: Request, allowed):
        self.req = req
        self.graph = req.stage_graph
        self.stage = -1
        self.stage_start_us = 0
        self.remaining = 0
        self.jobs = {}
        self.stage_times = []
        self.pattern = None
        self.done_us = None
        self.dropped = False
        self.drop_us = None
        self.node_us = {}
        self.allowed = allowed
        self.attained = 0
        self.scheduled = False      # any subrequest ever ran; admission drops stop applying


class Segment:
    __slots__ = ("members", "ends", "lats", "k", "prefill", "version")

    def __init__(self, members, ends, lats, prefill, version):
        self.members = members
        self.ends = ends
        self.lats = lats
        self.k = len(ends)
        self.prefill = prefill
        self.version = version


class Replica:
    def __init__(self, rid: int, capacity: int, slowdown: float, v0: float, window: int):
        self.id = rid
        self.capacity = capacity
        self.slowdown = slowdown
        self.v0 = v0
        self.running: list[int] = []
        self.seg: Segment | None = None
        self.version = 0
        self.iters = 0
        self.frames = 0
        self.lat_hist = deque(maxlen=window)
        self.stall_us = 0
        self.pending: str | None = None     # "frame" | "fill"

    @property
    def v_token(self) -> float:
        if self.lat_hist:
            return sum(self.lat_hist) / len(self.lat_hist)
        return self.v0


# --- default predictor ------------------------------------------------------------------------

def llm_invocations(req: Request):
    """(node, input_len, output_len, model, stage) for every LLM call of a request."""
    if req.stage_graph is None:
        return [(0, req.input_len, req.output_len, req.model_id, 0)]
    g = req.stage_graph
    return [(i, n.input_len, n.output_len, n.name, g.stages[i])
            for i, n in enumerate(g.nodes) if n.kind is NodeKind.LLM]


def training_rows(reqs, interval: int = DEFAULT_REFINE_INTERVAL, max_rounds: int = 12):
    rows = []
    for r in reqs:
        for node, li, lo, model, stage in llm_invocations(r):
            base = FeatureVector(li, r.app_tag, 0, stage, model)
            rows += refinement_rows(base, lo, (r.id, node), interval, max_rounds)
    return rows


@functools.lru_cache(maxsize=4)
def default_forest(seed: int = 12345, count: int = 3000, n_trees: int = 50) -> QuantileForest:
    """Forest trained on a held-out synthetic workload (ids disjoint from any run's seed)."""
    from .workload import WorkloadConfig, generate
    reqs = generate(WorkloadConfig(kind="poisson", count=count, seed=seed, rate=1.0))
    return fit_forest(training_rows(reqs), ForestParams(n_trees=n_trees, seed=seed))


# --- simulator ------------------------------------------------------------------------------------

class Simulator:
    def __init__(self, trace, config: RunConfig, *, forest: QuantileForest | None = None,
                 store: PatternStore | None = None):
        self.cfg = config
        self.policy = config.policy_kind
        self.cm = CostModel.from_config(config)
        self.spec = config.goodput
        self.rng = np.random.default_rng(config.seed)
        self.delta = config.delta_iters
        trace = sorted(trace, key=lambda r: (r.arrival, r.id))
        seen = set()
        self.trace = []
        for r in trace:
            try:
                validate_request(r)
            except ValueError as e:
                raise InvalidTrace(str(e)) from e
            if r.id in seen:
                raise InvalidTrace(f"duplicate request id {r.id}")
            seen.add(r.id)
            slo = r.slo.scaled(config.slo_scale) if config.slo_scale != 1.0 else r.slo
            self.trace.append(replace(r, slo=slo, generated=0, state=RequestState.QUEUED))
        if config.length_source == "qrf":
            self.forest = forest if forest is not None else default_forest()
        else:
            self.forest = None
        self.store = store if store is not None else (PatternStore() if config.use_patterns else None)
        self.mode = ShareMode(config.subdeadline_mode)
        self.replicas = []
        for i, rs in enumerate(config.replicas):
            cap = rs.capacity or config.B
            v0 = rs.v_token or iteration_latency(self.cm, [1]) * rs.slowdown
            self.replicas.append(Replica(i, cap, rs.slowdown, v0, self.delta))
        self.K = config.K or len(self.replicas)
        self.all_reps = tuple(range(len(self.replicas)))
        self.jobs: dict[int, Job] = {}
        self.queue: dict[int, Job] = {}
        self.heap = []
        self.seq = 0
        self.now = 0
        self.records: dict[int, RequestRecord] = {}
        self.singles: dict[int, Job] = {}
        self.compounds: dict[int, Compound] = {}
        self.frames = []
        self.advances = 0
        self.idle_violations = 0
        self.next_uid = 0
        self.adapter = CutoffAdapter(seed=config.seed) if config.adapt_p else None
        self.credit = 0.0
        self.last_credit = 0.0
        self.served_by_tag: dict[str, int] = {}
        self.last_decay = 0

    # -- event plumbing --------------------------------------------------------------
    def push(self, t_us: int, order: int, ident, payload) -> None:
        heapq.heappush(self.heap, (t_us, order, ident, self.seq, payload))
        self.seq += 1

    def run(self) -> SimResult:
        for r in self.trace:
            self.push(to_us(r.arrival), ARRIVAL, (r.id, 0), ("arr", r))
        while self.heap:
            t = self.heap[0][0]
            self.now = t
            while self.heap and self.heap[0][0] == t:
                _, _, _, _, payload = heapq.heappop(self.heap)
                self.handle(payload, t)
            for rep in self.replicas:
                if rep.seg is not None and len(rep.running) < rep.capacity and self.has_eligible(rep):
                    self.truncate(rep, t)
            for rep in self.replicas:
                if rep.seg is None:
                    if rep.pending or self.has_eligible(rep):
                        self.schedule(rep, t, frame=rep.pending == "frame")
                    rep.pending = None
                    if rep.running:
                        self.start_segment(rep, t)
                    elif self.has_eligible(rep):
                        self.idle_violations += 1
        return self.result()

    def handle(self, payload, t: int) -> None:
        kind = payload[0]
        if kind == "iter":
            _, rid, version = payload
            rep = self.replicas[rid]
            if rep.seg is not None and rep.seg.version == version:
                self.finish_segment(rep, rep.seg.k)
        elif kind == "tool":
            _, comp, node = payload
            self.node_done(comp, node, t)
        else:
            self.arrive(payload[1], t)

    # -- arrivals and compounds -----------------------------------------------------
    def allowed_replicas(self):
        if self.K == len(self.replicas):
            return self.all_reps
        return sample_replicas(len(self.replicas), self.K, self.rng)

    def new_job(self, req, node, li, lo, model, stage, t, comp, allowed) -> Job:
        job = Job(self.next_uid, req, node, li, lo, model, stage, t, comp, allowed,
                  self.spec.weights_for(req.weights))
        self.next_uid += 1
        self.jobs[job.uid] = job
        self.queue[job.uid] = job
        return job

    def arrive(self, req: Request, t: int) -> None:
        allowed = self.allowed_replicas()
        rec = RequestRecord(req.id, req.kind, req.arrival, req.slo, req.input_len, req.output_len,
                            tuple(self.spec.weights_for(req.weights)), req.app_tag)
        self.records[req.id] = rec
        if req.kind is SloKind.COMPOUND:
            comp = Compound(req, allowed)
            self.compounds[req.id] = comp
            self.release_stage(comp, 0, t)
        else:
            self.singles[req.id] = self.new_job(req, 0, req.input_len, req.output_len,
                                                req.model_id, 0, t, None, allowed)

    def release_stage(self, comp: Compound, s: int, t: int) -> None:
        comp.stage = s
        comp.stage_start_us = t
        g = comp.graph
        nodes = g.stage_nodes(s)
        comp.remaining = len(nodes)
        for i in nodes:
            n = g.nodes[i]
            if n.kind is NodeKind.LLM:
                comp.jobs[i] = self.new_job(comp.req, i, n.input_len, n.output_len, n.name, s, t,
                                            comp, comp.allowed)
            else:
                self.push(t + to_us(n.exec_time), TOOL, (comp.req.id, i), ("tool", comp, i))
        comp.pattern = self.lookup_pattern(comp, s)

    def lookup_pattern(self, comp: Compound, s: int):
        if self.store is None or len(self.store) == 0:
            return None
        g = comp.graph
        if s == 0:
            idents = tuple(sorted((g.nodes[i].kind.value, g.nodes[i].name) for i in g.stage_nodes(0)))
            return self.store.prior_share(idents)
        try:
            return self.store.match(self.partial_pattern(comp, s)).pattern
        except NoMatch:
            return None

    def partial_pattern(self, comp: Compound, m: int) -> PatternGraph:
        """Completed stages 0..m-1 with measured node attributes."""
        g = comp.graph
        keep = [i for i in range(len(g.nodes)) if g.stages[i] < m]
        remap = {old: new for new, old in enumerate(keep)}
        nodes = []
        for i in keep:
            n = g.nodes[i]
            if n.kind is NodeKind.LLM:
                nodes.append(PNode(NodeKind.LLM, n.name, g.stages[i], n.input_len, n.output_len))
            else:
                nodes.append(PNode(NodeKind.TOOL, n.name, g.stages[i], exec_ms=n.exec_time * 1000.0))
        edges = [(remap[a], remap[b]) for a, b in g.edges if a in remap and b in remap]
        return PatternGraph(nodes, edges, list(comp.stage_times[:m]))

    def node_done(self, comp: Compound, node: int, t: int) -> None:
        if comp.dropped:
            return
        comp.node_us[node] = t
        comp.remaining -= 1
        if comp.remaining > 0:
            return
        comp.stage_times.append(to_s(t - comp.stage_start_us))
        if comp.stage + 1 < comp.graph.n_stages:
            self.release_stage(comp, comp.stage + 1, t)
            return
        comp.done_us = t
        rec = self.records[comp.req.id]
        rec.completion_us = t
        if rec.completion_us <= to_us(comp.req.arrival) + to_us(comp.req.slo.e2el):
            self.credit += sum(j.w_in * j.input_len + j.w_out * j.output_len
                               for j in comp.jobs.values())
        if self.store is not None:
            pg = PatternGraph.from_stage_graph(comp.graph, comp.stage_times)
            try:
                self.store.ingest(pg, to_s(t))
            except OversizedPattern:
                pass
            if t - self.last_decay >= 60_000_000:
                self.store.decay_evict(to_s(t))
                self.last_decay = t

    def job_done(self, job: Job, t: int) -> None:
        job.state = RequestState.DONE
        job.done_us = t
        if job.comp is not None:
            self.node_done(job.comp, job.node, t)
            return
        rec = self.records[job.rid]
        rec.completion_us = t
        if job.kind in (SloKind.DEADLINE,) and t <= to_us(job.req.arrival) + to_us(job.req.slo.e2el):
            self.credit += job.w_in * job.input_len + job.w_out * job.output_len

    # -- admission ---------------------------------------------------------------------
    def admit(self, now: int) -> list:
        """Drop never-scheduled requests that waited longer than waiting_time.

        A compound counts as scheduled once any of its subrequests has run, and
        its wait is measured from the compound's arrival.
        """
        if self.cfg.waiting_time is None:
            return []
        limit = to_us(self.cfg.waiting_time)
        dropped = []
        for j in self.queue.values():
            if j.comp is None:
                if not j.scheduled and now - j.release_us > limit:
                    dropped.append(j)
            elif not j.comp.scheduled and now - to_us(j.comp.req.arrival) > limit:
                dropped.append(j)
        for j in dropped:
            if j.uid not in self.queue:
                continue
            if j.comp is not None:
                self.drop_compound(j.comp, to_us(j.comp.req.arrival) + limit)
            else:
                drop_us = j.release_us + limit
                del self.queue[j.uid]
                j.state = RequestState.DROPPED
                rec = self.records[j.rid]
                rec.dropped = True
                rec.drop_us = drop_us
        return [j.key for j in dropped]

    def drop_compound(self, comp: Compound, drop_us: int) -> None:
        comp.dropped = True
        comp.drop_us = drop_us
        rec = self.records[comp.req.id]
        rec.dropped = True
        rec.drop_us = drop_us
        for j in comp.jobs.values():
            if j.uid in self.queue:
                del self.queue[j.uid]
                j.state = RequestState.DROPPED

    def has_eligible(self, rep: Replica) -> bool:
        if not self.queue:
            return False
        if self.K == len(self.replicas):
            return True
        return any(rep.id in j.allowed for j in self.queue.values())

    def eligible(self, rep: Replica) -> list[Job]:
        if self.K == len(self.replicas):
            return list(self.queue.values())
        return [j for j in self.queue.values() if rep.id in j.allowed]

    # -- length bounds ------------------------------------------------------------------
    def ensure_bounds(self, jobs) -> None:
        q = self.cfg.q
        if self.forest is None:
            for j in jobs:
                if j.bound is None:
                    j.bound = LengthBound(j.output_len, q, 0)
                    j.median = float(j.output_len)
            return
        interval = self.cfg.refine_interval
        todo = [j for j in jobs
                if j.bound is None or j.generated - j.bound.as_of_generated >= interval]
        if not todo:
            return
        feats = [FeatureVector(j.input_len, j.app_tag, j.generated, j.stage, j.model,
                               content_hint(j.output_len, (j.rid, j.node), j.generated, interval))
                 for j in todo]
        qv = self.forest.quantiles(feats, [q, 0.5])
        for j, (hi, med) in zip(todo, qv):
            # a job still running has at least one token to go
            upper = max(int(math.ceil(hi - 1e-9)), j.generated + 1)
            j.bound = LengthBound(upper, q, j.generated)
            j.median = max(float(med), j.generated + 1.0)

    def upper(self, j: Job) -> int:
        if j.state is RequestState.DONE:
            return j.output_len
        return max(j.bound.total_upper, j.generated + 1)

    # -- analysis for GMAX -----------------------------------------------------------------
    def estimate(self, jobs: list[Job], now: int, v: float):
        """Arrays (goodput, t_gen, t_rem, priority) after starvation inflation."""
        siblings = []
        for j in jobs:
            if j.comp is not None:
                siblings.extend(j.comp.jobs[i] for i in j.comp.jobs
                                if j.comp.jobs[i].stage == j.stage and j.comp.jobs[i].bound is None
                                and j.comp.jobs[i].state is not RequestState.DONE)
        self.ensure_bounds(jobs + siblings)
        n = len(jobs)
        kind = np.empty(n, dtype=np.int8)
        len_rem = np.empty(n)
        reward = np.empty(n)
        upper = np.empty(n)
        gen = np.empty(n)
        t0 = np.zeros(n)
        tbt = np.zeros(n)
        dl = np.zeros(n)
        final = np.zeros(n)
        extra = np.empty(n)
        violated = np.zeros(n, dtype=bool)
        waited = np.empty(n)
        now_s = to_s(now)
        chunk = self.cm.prefill_chunk
        stage_cache = {}
        for i, j in enumerate(jobs):
            k = KIND_CODE[j.kind]
            kind[i] = k
            u = self.upper(j)
            upper[i] = u
            gen[i] = j.generated
            extra[i] = -(-j.prefill_left // chunk)
            waited[i] = j.frames_waited
            req = j.req
            if k == LAT:
                len_rem[i] = u - j.generated
                reward[i] = j.w_out
                t0[i] = req.arrival + req.slo.ttft
                tbt[i] = req.slo.tbt
                violated[i] = j.violated
            elif k == CMP:
                c = j.comp
                ck = (c.req.id, c.stage)
                if ck not in stage_cache:
                    lr, rw = 0.0, 0.0
                    for sj in c.jobs.values():
                        if sj.stage != c.stage:
                            continue
                        su = self.upper(sj)
                        lr += su - sj.generated
                        rw += sj.w_in * sj.input_len + sj.w_out * su
                    fd = req.arrival + req.slo.e2el
                    sd = stage_deadline(c.pattern, c.stage, req.arrival, to_s(c.stage_start_us),
                                        req.slo.e2el, self.mode)
                    stage_cache[ck] = (lr, rw, sd, fd)
                len_rem[i], reward[i], dl[i], final[i] = stage_cache[ck]
            else:
                len_rem[i] = u - j.generated
                reward[i] = j.w_in * j.input_len + j.w_out * u
                dl[i] = req.arrival + req.slo.e2el
                final[i] = dl[i]
        g, t_gen, t_rem, prio, expired = analyze_batch(
            kind, len_rem, now_s, v, reward=reward, upper=upper, generated=gen, t0=t0, tbt=tbt,
            deadline=dl, final_deadline=final, extra=extra, violated=violated,
            level=self.spec.level, feasibility_filter=self.cfg.feasibility_filter,
            eps=self.cfg.eps)
        g = g + self.cfg.delta_starve * waited
        prio = g / (t_gen + self.cfg.eps)
        if self.cfg.f > 0:
            prio = blend_fairness(prio, self.fair_scores(jobs, prio), self.cfg.f)
        return g, t_gen, t_rem, prio

    def fair_scores(self, jobs, prio) -> np.ndarray:
        """Service deficit of each job's app tag, scaled to the mean priority."""
        tags = sorted({j.app_tag for j in jobs} | set(self.served_by_tag))
        total = sum(self.served_by_tag.values())
        n = len(tags)
        share = {t: (self.served_by_tag.get(t, 0) / total if total else 1.0 / n) for t in tags}
        mean_p = float(np.mean(prio)) if len(prio) else 0.0
        return np.array([mean_p * min(2.0, max(0.0, 1.0 + n * (1.0 / n - share[j.app_tag])))
                         for j in jobs])

    # -- scheduling -----------------------------------------------------------------------
    def schedule(self, rep: Replica, now: int, frame: bool) -> None:
        self.admit(now)
        # subrequests of a compound that was dropped meanwhile give their slots back
        for uid in [u for u in rep.running if self.jobs[u].comp is not None and self.jobs[u].comp.dropped]:
            rep.running.remove(uid)
            self.jobs[uid].state = RequestState.DROPPED
        free = rep.capacity - len(rep.running)
        elig = self.eligible(rep)
        if frame:
            rep.frames += 1
        if not elig or (not frame and free <= 0):
            if frame:
                self.frames.append((now, rep.id, tuple(self.jobs[u].key for u in rep.running)))
                self.adapt()
            return
        if self.policy is PolicyKind.GMAX:
            admitted, evicted = self.gmax_pass(rep, now, frame, elig, free)
        else:
            admitted, evicted = self.baseline_pass(rep, now, frame, elig, free)
        for uid in evicted:
            j = self.jobs[uid]
            rep.running.remove(uid)
            j.state = RequestState.PREEMPTED
            j.replica = None
            j.preemptions += 1
            self.queue[uid] = j
            rep.stall_us += int(round(j.ctx / self.cfg.io_bandwidth * 1e6))
        for uid in admitted:
            j = self.queue.pop(uid)
            j.state = RequestState.RUNNING
            j.scheduled = True
            if j.comp is not None:
                j.comp.scheduled = True
            j.replica = rep.id
            rep.running.append(uid)
        if frame:
            chosen = set(admitted)
            for j in elig:
                if j.uid not in chosen:
                    j.frames_waited += 1
            self.frames.append((now, rep.id, tuple(self.jobs[u].key for u in rep.running)))
            self.adapt()

    def adapt(self) -> None:
        if self.adapter is None:
            return
        self.adapter.record(self.credit - self.last_credit)
        self.last_credit = self.credit

    def gmax_pass(self, rep, now, frame, elig, free):
        p = self.adapter.p if self.adapter is not None else self.cfg.p
        v = rep.v_token
        if not frame:
            g, t_gen, t_rem, prio = self.estimate(elig, now, v)
            idx = select_window(prio, [j.ctx for j in elig], [j.release_us for j in elig],
                                [j.uid for j in elig], free, p)
            return [elig[i].uid for i in idx], []
        running = [self.jobs[u] for u in rep.running]
        cands = running + elig
        g, t_gen, t_rem, prio = self.estimate(cands, now, v)
        idx = select_window(prio, [j.ctx for j in cands], [j.release_us for j in cands],
                            [j.uid for j in cands], rep.capacity, p)
        group = [cands[i].uid for i in idx]
        est = {}
        for i in range(len(cands)):
            j = cands[i]
            est[j.uid] = RequestEstimate(j.uid, 0.0, float(t_gen[i]), float(t_rem[i]),
                                         float(g[i]), float(prio[i]))
        kv = {j.uid: j.ctx for j in running}
        plan = preemption_check(rep.running, group, est, kv, self.cfg.io_bandwidth, 1.0 / v,
                                self.cfg.delta_pmtn, self.delta * v, rep.capacity, rep.frames)
        run_set = set(rep.running)
        admitted = [u for u in plan.selected if u not in run_set]
        return admitted, plan.preempted

    def view(self, j: Job, now_s: float) -> JobView:
        req = j.req
        if j.kind is SloKind.LATENCY:
            dl = req.arrival + req.slo.ttft + j.generated * req.slo.tbt
        else:
            dl = req.arrival + req.slo.e2el
        attained = j.comp.attained if j.comp is not None else j.generated
        pred = (j.median if j.median is not None else j.output_len) - j.generated
        return JobView(j.uid, to_s(j.release_us), dl, j.output_len - j.generated, pred, attained)

    def baseline_pass(self, rep, now, frame, elig, free):
        now_s = to_s(now)
        if self.policy is PolicyKind.LTR_PREDICTED:
            self.ensure_bounds(elig + ([self.jobs[u] for u in rep.running] if frame else []))
        if frame and self.policy.preemptive:
            cands = [self.jobs[u] for u in rep.running] + elig
            top = policy_order(self.policy, [self.view(j, now_s) for j in cands], rep.capacity, now_s)
            top_set = set(top)
            evicted = [u for u in rep.running if u not in top_set]
            run_set = set(rep.running)
            return [u for u in top if u not in run_set], evicted
        if free <= 0:
            return [], []
        return policy_order(self.policy, [self.view(j, now_s) for j in elig], free, now_s), []

    # -- execution -----------------------------------------------------------------------------
    def start_segment(self, rep: Replica, t: int) -> None:
        members = list(rep.running)
        jobs = [self.jobs[u] for u in members]
        chunk = self.cm.prefill_chunk
        prefill = any(j.prefill_left > 0 for j in jobs)
        if prefill:
            k = 1
            ctx0 = max((j.input_len - j.prefill_left + min(chunk, j.prefill_left))
                       if j.prefill_left > 0 else j.ctx for j in jobs)
        else:
            k = min(self.delta - rep.iters % self.delta,
                    min(j.output_len - j.generated for j in jobs))
            ctx0 = max(j.ctx for j in jobs)
        cm = self.cm
        lats = (cm.c0 + cm.c_att * (ctx0 + np.arange(k)) + cm.c_lin * len(jobs)) * rep.slowdown
        lat_us = np.maximum(1, np.rint(lats * 1e6)).astype(np.int64)
        ends = t + rep.stall_us + np.cumsum(lat_us)
        rep.stall_us = 0
        rep.version += 1
        rep.seg = Segment(members, ends, lat_us, prefill, rep.version)
        self.push(int(ends[-1]), ITER, (rep.id, 0), ("iter", rep.id, rep.version))

    def truncate(self, rep: Replica, t: int) -> None:
        """Cut the running segment at its next iteration boundary so idle slots can fill."""
        seg = rep.seg
        j = int(np.searchsorted(seg.ends[:seg.k], t, side="left"))
        if j >= seg.k - 1:
            return
        if seg.ends[j] == t:
            self.finish_segment(rep, j + 1)
            return
        seg.k = j + 1
        rep.version += 1
        seg.version = rep.version
        self.push(int(seg.ends[j]), ITER, (rep.id, 0), ("iter", rep.id, rep.version))

    def finish_segment(self, rep: Replica, k: int) -> None:
        seg = rep.seg
        ends = seg.ends[:k]
        t_end = int(ends[-1])
        chunk = self.cm.prefill_chunk
        done = []
        track_lat = self.adapter is not None or self.spec.level is GoodputLevel.REQUEST
        for uid in seg.members:
            j = self.jobs[uid]
            if j.state is not RequestState.RUNNING:
                continue
            if seg.prefill and j.prefill_left > 0:
                j.prefill_left -= min(chunk, j.prefill_left)
                continue
            j.chunks.append(ends)
            if j.kind is SloKind.LATENCY and track_lat:
                dl = (to_us(j.req.arrival) + to_us(j.req.slo.ttft)
                      + to_us(j.req.slo.tbt) * np.arange(j.generated, j.generated + k))
                ok = ends <= dl
                self.credit += j.w_out * int(ok.sum())
                if not ok.all():
                    j.violated = True
            j.generated += k
            self.advances += k
            if j.comp is not None:
                j.comp.attained += k
            self.served_by_tag[j.app_tag] = self.served_by_tag.get(j.app_tag, 0) + k
            if j.generated >= j.output_len:
                done.append(j)
        rep.iters += k
        rep.lat_hist.extend((seg.lats[:k] / 1e6).tolist())
        rep.seg = None
        for j in done:
            rep.running.remove(j.uid)
            self.job_done(j, t_end)
        rep.pending = "frame" if rep.iters % self.delta == 0 else "fill"

    # -- output -----------------------------------------------------------------------------------
    def result(self) -> SimResult:
        recs = []
        max_wait = 0
        for rid in sorted(self.records):
            rec = self.records[rid]
            if rid in self.singles:
                j = self.singles[rid]
                rec.tokens_us = j.tokens()
                rec.preemptions = j.preemptions
                rec.frames_waited = j.frames_waited
            else:
                comp = self.compounds[rid]
                rec.subs = [SubRecord(j.node, j.model, j.input_len, j.output_len, j.release_us,
                                      j.tokens(), j.done_us)
                            for j in sorted(comp.jobs.values(), key=lambda x: x.node)]
                rec.preemptions = sum(j.preemptions for j in comp.jobs.values())
                rec.frames_waited = max((j.frames_waited for j in comp.jobs.values()), default=0)
            max_wait = max(max_wait, rec.frames_waited)
            recs.append(rec)
        return SimResult(self.policy.value, recs, self.now if recs else 0, self.frames,
                         self.advances, self.idle_violations, max_wait, self.cfg.to_dict())


def run(trace, policy=None, config: RunConfig | None = None, seed: int | None = None, *,
        forest: QuantileForest | None = None, store: PatternStore | None = None) -> SimResult:
    """Simulate ``trace`` under ``policy`` (overrides ``config.policy``)."""
    config = config or RunConfig()
    overrides = {}
    if policy is not None:
        overrides["policy"] = PolicyKind(policy).value
    if seed is not None:
        overrides["seed"] = seed
    if overrides:
        config = config.with_(**overrides)
    return Simulator(trace, config, forest=forest, store=store).run()
