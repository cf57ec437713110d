"""Domain types shared across the simulator: requests, SLO classes, stage graphs, replicas."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

US_PER_S = 1_000_000


def to_us(seconds: float) -> int:
    """Seconds -> integer microseconds (the simulator's clock resolution)."""
    return int(round(seconds * US_PER_S))


def to_s(us: int) -> float:
    return us / US_PER_S


class InvalidLength(ValueError):
    pass


class MissingStageGraph(ValueError):
    pass


class UnexpectedStageGraph(ValueError):
    pass


class InvalidSlo(ValueError):
    pass


class InvalidGraph(ValueError):
    pass


class InvalidTrace(ValueError):
    pass


class ConfigError(ValueError):
    pass


class SloKind(str, Enum):
    LATENCY = "latency"
    DEADLINE = "deadline"
    COMPOUND = "compound"
    BEST_EFFORT = "besteffort"


@dataclass(frozen=True)
class SloClass:
    """Per-request responsiveness contract.

    Only the fields relevant to ``kind`` are set; use the constructors
    :meth:`latency`, :meth:`deadline`, :meth:`compound`, :meth:`best_effort`.
    """

    kind: SloKind
    ttft: float | None = None
    tbt: float | None = None
    e2el: float | None = None

    def __post_init__(self):
        if self.kind is SloKind.LATENCY:
            if self.ttft is None or self.tbt is None:
                raise InvalidSlo("latency-sensitive SLO needs ttft and tbt")
            vals = (self.ttft, self.tbt)
        else:
            if self.e2el is None:
                raise InvalidSlo(f"{self.kind.value} SLO needs a completion deadline")
            vals = (self.e2el,)
        if not all(v > 0 and v != float("inf") for v in vals):
            raise InvalidSlo(f"SLO times must be finite and strictly positive: {vals}")

    @classmethod
    def latency(cls, ttft: float, tbt: float) -> SloClass:
        return cls(SloKind.LATENCY, ttft=ttft, tbt=tbt)

    @classmethod
    def deadline(cls, e2el: float) -> SloClass:
        return cls(SloKind.DEADLINE, e2el=e2el)

    @classmethod
    def compound(cls, e2el: float) -> SloClass:
        return cls(SloKind.COMPOUND, e2el=e2el)

    @classmethod
    def best_effort(cls, default_deadline: float) -> SloClass:
        return cls(SloKind.BEST_EFFORT, e2el=default_deadline)

    @property
    def default_deadline(self) -> float | None:
        return self.e2el if self.kind is SloKind.BEST_EFFORT else None

    def scaled(self, factor: float) -> SloClass:
        """Multiply every time field by ``factor``."""
        return SloClass(
            self.kind,
            ttft=None if self.ttft is None else self.ttft * factor,
            tbt=None if self.tbt is None else self.tbt * factor,
            e2el=None if self.e2el is None else self.e2el * factor,
        )

    def to_dict(self) -> dict:
        out = {}
        if self.ttft is not None:
            out["ttft_s"] = self.ttft
        if self.tbt is not None:
            out["tbt_s"] = self.tbt
        if self.e2el is not None:
            out["e2el_s"] = self.e2el
        return out

    @classmethod
    def from_dict(cls, kind: str, d: dict) -> SloClass:
        k = SloKind(kind)
        if k is SloKind.LATENCY:
            return cls.latency(d["ttft_s"], d["tbt_s"])
        return cls(k, e2el=d["e2el_s"])


class RequestState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    PREEMPTED = "preempted"
    DONE = "done"
    DROPPED = "dropped"


_TERMINAL = (RequestState.DONE, RequestState.DROPPED)


class NodeKind(str, Enum):
    LLM = "llm"
    TOOL = "tool"


@dataclass(frozen=True)
class StageNode:
    kind: NodeKind
    name: str  # model id for LLM nodes, tool id for tool nodes
    input_len: int = 0
    output_len: int = 0
    exec_time: float = 0.0

    @classmethod
    def llm(cls, model_id: str, input_len: int, output_len: int) -> StageNode:
        return cls(NodeKind.LLM, model_id, input_len=input_len, output_len=output_len)

    @classmethod
    def tool(cls, tool_id: str, exec_time: float) -> StageNode:
        return cls(NodeKind.TOOL, tool_id, exec_time=exec_time)

    def to_dict(self) -> dict:
        if self.kind is NodeKind.LLM:
            return {"kind": "llm", "model": self.name, "input_len": self.input_len,
                    "output_len": self.output_len}
        return {"kind": "tool", "tool": self.name, "exec_time_s": self.exec_time}

    @classmethod
    def from_dict(cls, d: dict) -> StageNode:
        if d["kind"] == "llm":
            return cls.llm(d["model"], int(d["input_len"]), int(d["output_len"]))
        return cls.tool(d["tool"], float(d["exec_time_s"]))


@dataclass(frozen=True)
class StageGraph:
    """DAG of LLM and tool invocations of one compound request.

    Stage index of a node is its longest-path depth from a root, so stage
    ``s`` may start only once every stage ``s-1`` node has finished.
    """

    nodes: tuple[StageNode, ...]
    edges: tuple[tuple[int, int], ...] = ()
    stages: tuple[int, ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple((int(a), int(b)) for a, b in self.edges))
        object.__setattr__(self, "stages", _topo_levels(len(self.nodes), self.edges))

    @property
    def n_stages(self) -> int:
        return max(self.stages) + 1 if self.stages else 0

    def stage_nodes(self, s: int) -> list[int]:
        return [i for i, st in enumerate(self.stages) if st == s]

    def parents(self, i: int) -> list[int]:
        return [a for a, b in self.edges if b == i]

    def llm_nodes(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind is NodeKind.LLM]

    def total_lengths(self) -> tuple[int, int]:
        li = sum(n.input_len for n in self.nodes if n.kind is NodeKind.LLM)
        lo = sum(n.output_len for n in self.nodes if n.kind is NodeKind.LLM)
        return li, lo

    def to_dict(self) -> dict:
        return {"nodes": [n.to_dict() for n in self.nodes], "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, d: dict) -> StageGraph:
        return cls(tuple(StageNode.from_dict(n) for n in d["nodes"]),
                   tuple(tuple(e) for e in d.get("edges", ())))


def _topo_levels(n: int, edges) -> tuple[int, ...]:
    if n == 0:
        raise InvalidGraph("stage graph has no nodes")
    children = [[] for _ in range(n)]
    indeg = [0] * n
    for a, b in edges:
        if not (0 <= a < n and 0 <= b < n) or a == b:
            raise InvalidGraph(f"bad edge ({a}, {b})")
        children[a].append(b)
        indeg[b] += 1
    level = [0] * n
    frontier = [i for i in range(n) if indeg[i] == 0]
    seen = 0
    while frontier:
        nxt = []
        for i in frontier:
            seen += 1
            for c in children[i]:
                level[c] = max(level[c], level[i] + 1)
                indeg[c] -= 1
                if indeg[c] == 0:
                    nxt.append(c)
        frontier = nxt
    if seen != n:
        raise InvalidGraph("stage graph has a cycle")
    return tuple(level)


@dataclass
class Request:
    """One LLM call (or one compound program) as submitted to the server.

    ``output_len`` is ground truth: only the engine and the offline oracle
    read it, schedulers see length bounds instead.
    """

    id: int
    arrival: float
    input_len: int
    output_len: int
    slo: SloClass
    app_tag: str = "chatbot"
    stage_graph: StageGraph | None = None
    weights: tuple[float, float] = (1.0, 1.0)
    model_id: str = "default"
    generated: int = 0
    state: RequestState = RequestState.QUEUED

    @property
    def kind(self) -> SloKind:
        return self.slo.kind

    def base_goodput(self) -> float:
        return base_goodput(self)

    def set_state(self, new: RequestState) -> None:
        if self.state in _TERMINAL and new is not self.state:
            raise ValueError(f"request {self.id} is {self.state.value}; cannot become {new.value}")
        self.state = new


def base_goodput(req: Request) -> float:
    """Full credit of a request: input and output tokens, each weighted."""
    w_in, w_out = req.weights
    return w_in * req.input_len + w_out * req.output_len


def validate_request(req: Request) -> None:
    """Raise if ``req`` violates a Request invariant; return None otherwise."""
    if req.input_len < 1 or req.output_len < 1:
        raise InvalidLength(f"request {req.id}: lengths must be >= 1 "
                            f"(got {req.input_len}, {req.output_len})")
    if not 0 <= req.generated <= req.output_len:
        raise InvalidLength(f"request {req.id}: generated={req.generated} out of range")
    if req.arrival < 0:
        raise ValueError(f"request {req.id}: negative arrival")
    w_in, w_out = req.weights
    if w_in < 0 or w_out < 0:
        raise ValueError(f"request {req.id}: negative goodput weight")
    if base_goodput(req) <= 0:
        raise ValueError(f"request {req.id}: base goodput must be positive")
    if req.kind is SloKind.COMPOUND:
        if req.stage_graph is None:
            raise MissingStageGraph(f"compound request {req.id} has no stage graph")
        for n in req.stage_graph.nodes:
            if n.kind is NodeKind.LLM and (n.input_len < 1 or n.output_len < 1):
                raise InvalidLength(f"request {req.id}: LLM node with nonpositive length")
            if n.kind is NodeKind.TOOL and n.exec_time < 0:
                raise InvalidLength(f"request {req.id}: negative tool time")
        if not req.stage_graph.llm_nodes():
            raise InvalidLength(f"compound request {req.id} has no LLM node")
    elif req.stage_graph is not None:
        raise UnexpectedStageGraph(f"{req.kind.value} request {req.id} carries a stage graph")


@dataclass(frozen=True)
class ModelReplica:
    """One serving instance.

    ``v_token`` is the seconds-per-token baseline used before any iteration has
    been measured; ``slowdown`` scales the engine's cost model for this replica.
    """

    replica_id: int
    v_token: float
    capacity: int
    slowdown: float = 1.0

    def __post_init__(self):
        if self.v_token <= 0:
            raise ValueError("v_token must be positive")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.slowdown <= 0:
            raise ValueError("slowdown must be positive")
