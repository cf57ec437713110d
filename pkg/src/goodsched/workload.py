"""Synthetic workloads and the JSONL trace format.

Lengths are lognormal, moment-matched to published chatbot / deep-research
statistics, with log input and log output correlated so that a predictor
conditioned on the prompt has something to learn. Compound programs are
instances of a fixed set of per-application templates, so historical
pattern matching sees recurring structure.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import (InvalidTrace, NodeKind, Request, SloClass, SloKind, StageGraph, StageNode,
                   validate_request)


class UnknownKind(ValueError):
    pass


KINDS = ("chatbot", "deepresearch", "mixed", "poisson", "edf_adv", "sjf_adv")


@dataclass(frozen=True)
class LengthStats:
    in_mean: float
    in_std: float
    out_mean: float
    out_std: float


LENGTHS = {
    ("chatbot", "single"): LengthStats(93, 244, 318, 313),
    ("deepresearch", "single"): LengthStats(1911, 2781, 534, 644),
    ("chatbot", "compound"): LengthStats(1300, 912, 4458, 1176),
    ("deepresearch", "compound"): LengthStats(12223, 8407, 3541, 2370),
}

MODELS = ("llm-a", "llm-b")
TOOLS = ("search", "code", "browse")


def lognormal_params(mean: float, std: float) -> tuple[float, float]:
    """(mu, sigma) of the lognormal with the given mean and standard deviation."""
    s2 = math.log1p((std / mean) ** 2)
    return math.log(mean) - s2 / 2, math.sqrt(s2)


@dataclass
class WorkloadConfig:
    kind: str = "poisson"
    count: int = 1000
    seed: int = 0
    rate: float = 1.0               # mean arrivals per second
    arrival: str | None = None      # poisson | bursty; None -> per-kind default
    ttft: float = 2.0
    tbt: float = 0.1
    e2el: float = 20.0
    stage_e2el: float = 20.0        # compound deadline per stage
    rho: float = 0.5                # corr(log L_i, log L_o)
    besteffort_frac: float = 0.0
    besteffort_deadline: float = 300.0
    burst_period: float = 30.0      # mean length of an on or off phase (s)
    burst_ratio: float = 5.0        # on-rate / off-rate
    max_input: int = 32768
    max_output: int = 8192
    n_templates: int = 16
    template_seed: int = 0
    tool_frac: float = 0.3
    # adversarial kinds
    adv_T: float = 10.0
    adv_N: int = 9
    adv_M: float = 100.0
    adv_v_token: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


# --- arrivals ------------------------------------------------------------------------

def arrival_times(n: int, rate: float, mode: str, rng: np.random.Generator,
                  burst_period: float = 30.0, burst_ratio: float = 5.0) -> np.ndarray:
    if rate <= 0:
        raise ValueError("rate must be positive")
    if mode == "poisson":
        t = np.cumsum(rng.exponential(1.0 / rate, size=n))
    elif mode == "bursty":
        # two-state modulated Poisson; equal mean phase lengths keep the average at `rate`
        hi = 2 * rate * burst_ratio / (1 + burst_ratio)
        lo = hi / burst_ratio
        out = []
        t, on = 0.0, True
        phase_end = rng.exponential(burst_period)
        while len(out) < n:
            r = hi if on else lo
            gap = rng.exponential(1.0 / r)
            if t + gap > phase_end:
                t = phase_end
                on = not on
                phase_end = t + rng.exponential(burst_period)
                continue
            t += gap
            out.append(t)
        t = np.asarray(out)
    else:
        raise ValueError(f"unknown arrival mode {mode!r}")
    return np.round(t, 6)


# --- lengths ------------------------------------------------------------------------------

def sample_lengths(stats: LengthStats, n: int, rng: np.random.Generator, rho: float = 0.5,
                   max_input: int = 32768, max_output: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    mu_i, s_i = lognormal_params(stats.in_mean, stats.in_std)
    mu_o, s_o = lognormal_params(stats.out_mean, stats.out_std)
    z1 = rng.standard_normal(n)
    z2 = rho * z1 + math.sqrt(1 - rho * rho) * rng.standard_normal(n)
    li = np.clip(np.rint(np.exp(mu_i + s_i * z1)), 1, max_input).astype(int)
    lo = np.clip(np.rint(np.exp(mu_o + s_o * z2)), 1, max_output).astype(int)
    return li, lo


# --- compound templates ------------------------------------------------------------------------

@dataclass
class Template:
    app: str
    stage_nodes: list          # per stage: list of (kind, name)
    edges: list
    in_share: np.ndarray       # over LLM nodes (flat order)
    out_share: np.ndarray
    tool_mean: dict = field(default_factory=dict)   # flat node index -> seconds


def make_templates(app: str, n: int, seed: int = 0, tool_frac: float = 0.3) -> list[Template]:
    rng = np.random.default_rng([seed, 1 if app == "chatbot" else 2])
    out = []
    for _ in range(n):
        n_stages = int(rng.integers(2, 9))
        stage_nodes = []
        for s in range(n_stages):
            k = int(rng.integers(1, 4))
            nodes = []
            for _ in range(k):
                if s > 0 and rng.random() < tool_frac:
                    nodes.append((NodeKind.TOOL, TOOLS[int(rng.integers(len(TOOLS)))]))
                else:
                    nodes.append((NodeKind.LLM, MODELS[int(rng.integers(len(MODELS)))]))
            stage_nodes.append(nodes)
        if not any(k is NodeKind.LLM for st in stage_nodes for k, _ in st):
            stage_nodes[0][0] = (NodeKind.LLM, MODELS[0])
        starts = np.cumsum([0] + [len(st) for st in stage_nodes])
        edges = []
        for s in range(1, n_stages):
            prev = list(range(starts[s - 1], starts[s]))
            for c in range(starts[s], starts[s + 1]):
                main = prev[int(rng.integers(len(prev)))]
                edges.append((main, c))
                for p in prev:
                    if p != main and rng.random() < 0.3:
                        edges.append((p, c))
        flat = [nd for st in stage_nodes for nd in st]
        n_llm = sum(1 for k, _ in flat if k is NodeKind.LLM)
        tool_mean = {i: float(np.exp(rng.normal(math.log(1.2), 0.6)))
                     for i, (k, _) in enumerate(flat) if k is NodeKind.TOOL}
        out.append(Template(app, stage_nodes, sorted(edges), rng.dirichlet(2 * np.ones(n_llm)),
                            rng.dirichlet(2 * np.ones(n_llm)), tool_mean))
    return out


def _split(total: int, share: np.ndarray, rng, noise: float = 0.25) -> list[int]:
    w = share * np.exp(noise * rng.standard_normal(len(share)))
    w /= w.sum()
    return [max(1, int(round(total * x))) for x in w]


def instantiate(tpl: Template, total_in: int, total_out: int, rng) -> StageGraph:
    flat = [nd for st in tpl.stage_nodes for nd in st]
    ins = _split(total_in, tpl.in_share, rng)
    outs = _split(total_out, tpl.out_share, rng)
    nodes, j = [], 0
    for i, (kind, name) in enumerate(flat):
        if kind is NodeKind.LLM:
            nodes.append(StageNode.llm(name, ins[j], outs[j]))
            j += 1
        else:
            t = tpl.tool_mean[i] * math.exp(0.3 * rng.standard_normal())
            nodes.append(StageNode.tool(name, round(t, 6)))
    return StageGraph(tuple(nodes), tuple(tpl.edges))


def stage_times(g: StageGraph, v_token: float = 0.02, prefill_rate: float = 25_000.0) -> list[float]:
    """Nominal uncontended execution time per stage: its slowest node."""
    t = [0.0] * g.n_stages
    for i, n in enumerate(g.nodes):
        if n.kind is NodeKind.LLM:
            d = n.output_len * v_token + n.input_len / prefill_rate
        else:
            d = n.exec_time
        t[g.stages[i]] = max(t[g.stages[i]], d)
    return t


def pattern_families(n_families: int, per_family: int, seed: int = 0, app: str = "deepresearch",
                     v_token: float = 0.02, min_stages: int = 1):
    """``[(family, PatternGraph), ...]``: each family is one compound template,
    its members independent instantiations with their own lengths and tool times."""
    from .patterns import MAX_PACKED_BYTES, PatternGraph

    rng = np.random.default_rng([seed, 17])
    tpls = [t for t in make_templates(app, 4 * n_families + 16, seed=seed)
            if len(t.stage_nodes) >= min_stages]
    out, fam = [], 0
    for tpl in tpls:
        if fam == n_families:
            break
        li, lo = sample_lengths(LENGTHS[app, "compound"], per_family, rng)
        members = []
        for k in range(per_family):
            g = instantiate(tpl, int(li[k]), int(lo[k]), rng)
            members.append(PatternGraph.from_stage_graph(g, stage_times(g, v_token)))
        if members[0].packed_size() >= MAX_PACKED_BYTES:
            continue
        out += [(fam, m) for m in members]
        fam += 1
    return out


# --- generation ------------------------------------------------------------------------------------

def _single(rid, t, app, slo, li, lo, model="llm-a") -> Request:
    return Request(rid, float(t), int(li), int(lo), slo, app_tag=app, model_id=model)


def generate(cfg: WorkloadConfig) -> list[Request]:
    if cfg.kind not in KINDS:
        raise UnknownKind(f"unknown workload kind {cfg.kind!r}; expected one of {KINDS}")
    if cfg.kind in ("edf_adv", "sjf_adv"):
        from .analysis import adversary_requests, edf_adversary, sjf_adversary
        build = edf_adversary if cfg.kind == "edf_adv" else sjf_adversary
        return adversary_requests(build(cfg.adv_T, cfg.adv_N, cfg.adv_M), cfg.adv_v_token)

    rng = np.random.default_rng(cfg.seed)
    n = cfg.count
    mode = cfg.arrival or ("bursty" if cfg.kind == "mixed" else "poisson")
    times = arrival_times(n, cfg.rate, mode, rng, cfg.burst_period, cfg.burst_ratio)
    lat = SloClass.latency(cfg.ttft, cfg.tbt)
    ddl = SloClass.deadline(cfg.e2el)
    be = SloClass.best_effort(cfg.besteffort_deadline)

    if cfg.kind == "chatbot":
        li, lo = sample_lengths(LENGTHS["chatbot", "single"], n, rng, cfg.rho, cfg.max_input, cfg.max_output)
        return [_single(i, times[i], "chatbot", lat, li[i], lo[i]) for i in range(n)]
    if cfg.kind == "deepresearch":
        li, lo = sample_lengths(LENGTHS["deepresearch", "single"], n, rng, cfg.rho, cfg.max_input, cfg.max_output)
        return [_single(i, times[i], "deepresearch", ddl, li[i], lo[i]) for i in range(n)]

    # mixed / poisson: 1:1:1 latency / deadline / compound, plus optional best-effort
    pattern = rng.integers(0, 3, size=n)
    if cfg.besteffort_frac > 0:
        pattern = np.where(rng.random(n) < cfg.besteffort_frac, 3, pattern)
    app_dr = rng.random(n) < 0.5
    pools = {}
    for key in LENGTHS:
        pools[key] = sample_lengths(LENGTHS[key], n, rng, cfg.rho, cfg.max_input * 8, cfg.max_output * 4)
    templates = {app: make_templates(app, cfg.n_templates, cfg.template_seed, cfg.tool_frac)
                 for app in ("chatbot", "deepresearch")}
    reqs = []
    for i in range(n):
        kind = int(pattern[i])
        app = "deepresearch" if app_dr[i] else "chatbot"
        if kind == 0:
            li, lo = pools["chatbot", "single"]
            reqs.append(_single(i, times[i], "chatbot", lat, li[i], lo[i]))
        elif kind in (1, 3):
            li, lo = pools[app, "single"]
            li_i = min(int(li[i]), cfg.max_input)
            lo_i = min(int(lo[i]), cfg.max_output)
            reqs.append(_single(i, times[i], app, ddl if kind == 1 else be, li_i, lo_i))
        else:
            tpls = templates[app]
            tpl = tpls[int(rng.integers(len(tpls)))]
            li, lo = pools[app, "compound"]
            g = instantiate(tpl, int(li[i]), int(lo[i]), rng)
            tin, tout = g.total_lengths()
            reqs.append(Request(i, float(times[i]), tin, tout,
                                SloClass.compound(cfg.stage_e2el * g.n_stages),
                                app_tag=app, stage_graph=g, model_id="compound"))
    return reqs


# --- trace I/O ----------------------------------------------------------------------------------

def to_record(req: Request) -> dict:
    rec = {"id": req.id, "arrival_s": req.arrival, "type": req.kind.value,
           "input_len": req.input_len, "output_len": req.output_len,
           "slo": req.slo.to_dict(), "app_tag": req.app_tag}
    if req.stage_graph is not None:
        rec["stages"] = req.stage_graph.to_dict()
    if tuple(req.weights) != (1.0, 1.0):
        rec["weights"] = list(req.weights)
    if req.model_id != "default":
        rec["model"] = req.model_id
    return rec


def from_record(rec: dict) -> Request:
    graph = StageGraph.from_dict(rec["stages"]) if rec.get("stages") is not None else None
    req = Request(int(rec["id"]), float(rec["arrival_s"]), int(rec["input_len"]),
                  int(rec["output_len"]), SloClass.from_dict(rec["type"], rec["slo"]),
                  app_tag=rec.get("app_tag", "chatbot"), stage_graph=graph,
                  weights=tuple(rec.get("weights", (1.0, 1.0))),
                  model_id=rec.get("model", "default"))
    validate_request(req)
    return req


def dumps_trace(reqs: list[Request]) -> str:
    return "".join(json.dumps(to_record(r), sort_keys=True, separators=(",", ":")) + "\n"
                   for r in reqs)


def write_trace(reqs: list[Request], path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_trace(reqs))


def check_trace(reqs: list[Request]) -> None:
    seen = set()
    last = -math.inf
    for r in reqs:
        if r.id in seen:
            raise InvalidTrace(f"duplicate request id {r.id}")
        seen.add(r.id)
        if r.arrival < last:
            raise InvalidTrace(f"request {r.id} arrives before its predecessor")
        last = r.arrival
        try:
            validate_request(r)
        except ValueError as e:
            raise InvalidTrace(str(e)) from e


def read_trace(path) -> list[Request]:
    reqs = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                reqs.append(from_record(json.loads(line)))
            except (ValueError, KeyError, TypeError) as e:
                raise InvalidTrace(f"line {ln}: {e}") from e
    check_trace(reqs)
    return reqs


def kind_counts(reqs: list[Request]) -> dict[str, int]:
    out = {k.value: 0 for k in SloKind}
    for r in reqs:
        out[r.kind.value] += 1
    return out
