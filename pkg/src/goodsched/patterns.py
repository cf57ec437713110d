"""Historical pattern graphs of compound requests: storage, prefix matching,
K-medoids clustering, decayed eviction and sub-deadline amortization."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import NodeKind, StageGraph, StageNode

MAX_PACKED_BYTES = 200
DECAY_PER_HOUR = 0.9


class OversizedPattern(ValueError):
    pass


class NoMatch(LookupError):
    pass


class TooFewGraphs(ValueError):
    pass


class ShareMode(str, Enum):
    CUMULATIVE = "cumulative"    # D_s = (t_<=s / t_total) * D
    PER_STAGE = "per_stage"      # budget for stage s = (t_s / t_total) * D
    REMAINING = "remaining"      # budget for stage s = (t_s / t_>=s) * remaining D


def kernel_bandwidth(xa: float, xb: float) -> float:
    return max(0.25 * max(xa, xb), 1.0)


def gaussian_similarity(xa: float, xb: float) -> float:
    sigma = kernel_bandwidth(xa, xb)
    return math.exp(-((xa - xb) ** 2) / (2.0 * sigma * sigma))


def _kernel_vec(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    sigma = np.maximum(0.25 * np.maximum(xa, xb), 1.0)
    return np.exp(-((xa - xb) ** 2) / (2.0 * sigma * sigma))


@dataclass(frozen=True)
class PNode:
    """Pattern-graph node. ``weight`` is output length (LLM) or exec time in ms (tool)."""

    kind: NodeKind
    name: str
    stage: int
    input_len: int = 0
    output_len: int = 0
    exec_ms: float = 0.0

    @property
    def weight(self) -> float:
        return float(self.output_len) if self.kind is NodeKind.LLM else self.exec_ms

    @property
    def identity(self) -> tuple[str, str]:
        return (self.kind.value, self.name)


def node_similarity(a: PNode, b: PNode) -> float:
    if a.identity != b.identity:
        return 0.0
    return gaussian_similarity(a.weight, b.weight)


def edge_similarity(a_child: PNode, b_child: PNode) -> float:
    """Edges are compared through the input length handed to the child."""
    if a_child.identity != b_child.identity:
        return 0.0
    return gaussian_similarity(a_child.input_len, b_child.input_len)


@dataclass
class PatternGraph:
    nodes: list[PNode]
    edges: list[tuple[int, int]]
    stage_times: list[float]
    id: int = -1
    reuse_score: float = 1.0
    last_touch: float = 0.0
    _canon: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if any(t < 0 for t in self.stage_times):
            raise ValueError("stage times must be nonnegative")
        n_st = max((n.stage for n in self.nodes), default=-1) + 1
        if len(self.stage_times) < n_st:
            raise ValueError("missing stage times")
        # canonical position of every node: stages in order, nodes sorted by identity
        order = sorted(range(len(self.nodes)),
                       key=lambda i: (self.nodes[i].stage, self.nodes[i].identity, i))
        self._canon = order
        self._pos = {old: new for new, old in enumerate(order)}

    @property
    def n_stages(self) -> int:
        return len(self.stage_times)

    @property
    def t_total(self) -> float:
        return float(sum(self.stage_times))

    def canonical_nodes(self) -> list[PNode]:
        return [self.nodes[i] for i in self._canon]

    def canonical_edges(self) -> list[tuple[int, int]]:
        return sorted((self._pos[a], self._pos[b]) for a, b in self.edges)

    def signature(self, m: int) -> tuple:
        """Identity structure of the first ``m`` stages (edges included)."""
        stages = []
        for s in range(m):
            stages.append(tuple(n.identity for n in self.canonical_nodes() if n.stage == s))
        n_prefix = sum(len(s) for s in stages)
        edges = tuple(e for e in self.canonical_edges() if e[1] < n_prefix)
        return (tuple(stages), edges)

    def prefix(self, m: int) -> PatternGraph:
        """The graph as revealed after its first ``m`` stages completed."""
        keep = [i for i, n in enumerate(self.nodes) if n.stage < m]
        remap = {old: new for new, old in enumerate(keep)}
        return PatternGraph([self.nodes[i] for i in keep],
                            [(remap[a], remap[b]) for a, b in self.edges if a in remap and b in remap],
                            list(self.stage_times[:m]), id=self.id)

    # -- compact encoding ------------------------------------------------
    def pack(self, vocab: dict[tuple[str, str], int]) -> bytes:
        """Binary record: identity ids index a store-level vocabulary."""
        out = [struct.pack("<BBB", len(self.nodes), len(self.edges), self.n_stages)]
        for n in self.nodes:
            ident = vocab.setdefault(n.identity, len(vocab))
            if ident > 255:
                raise OversizedPattern("identity vocabulary exceeds one byte")
            if n.kind is NodeKind.LLM:
                out.append(struct.pack("<BBHH", ident, n.stage, min(n.input_len, 65535),
                                       min(n.output_len, 65535)))
            else:
                out.append(struct.pack("<BBI", ident, n.stage, int(round(n.exec_ms))))
        for a, b in self.edges:
            out.append(struct.pack("<BB", a, b))
        for t in self.stage_times:
            out.append(struct.pack("<f", t))
        return b"".join(out)

    def packed_size(self) -> int:
        if len(self.nodes) > 255 or len(self.edges) > 255 or self.n_stages > 255:
            # the one-byte counters overflow; size computed from the record layout
            return 3 + 6 * len(self.nodes) + 2 * len(self.edges) + 4 * self.n_stages
        return len(self.pack({}))

    # -- JSON -------------------------------------------------------------
    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            if n.kind is NodeKind.LLM:
                nodes.append(["llm", n.name, n.stage, n.input_len, n.output_len])
            else:
                nodes.append(["tool", n.name, n.stage, n.exec_ms])
        return {"id": self.id, "nodes": nodes, "edges": [list(e) for e in self.edges],
                "t": self.stage_times, "reuse": self.reuse_score, "touch": self.last_touch}

    @classmethod
    def from_dict(cls, d: dict) -> PatternGraph:
        nodes = []
        for rec in d["nodes"]:
            if rec[0] == "llm":
                nodes.append(PNode(NodeKind.LLM, rec[1], int(rec[2]), int(rec[3]), int(rec[4])))
            else:
                nodes.append(PNode(NodeKind.TOOL, rec[1], int(rec[2]), exec_ms=float(rec[3])))
        return cls(nodes, [tuple(e) for e in d["edges"]], [float(t) for t in d["t"]],
                   id=int(d["id"]), reuse_score=float(d["reuse"]), last_touch=float(d["touch"]))

    @classmethod
    def from_stage_graph(cls, g: StageGraph, stage_times, node_lengths=None) -> PatternGraph:
        """Build from an executed StageGraph; ``node_lengths`` overrides LLM (in, out)."""
        nodes = []
        for i, n in enumerate(g.nodes):
            if n.kind is NodeKind.LLM:
                li, lo = (node_lengths or {}).get(i, (n.input_len, n.output_len))
                nodes.append(PNode(NodeKind.LLM, n.name, g.stages[i], li, lo))
            else:
                nodes.append(PNode(NodeKind.TOOL, n.name, g.stages[i], exec_ms=n.exec_time * 1000.0))
        return cls(nodes, list(g.edges), list(stage_times))


def graph_similarity(partial: PatternGraph, cand: PatternGraph, m: int | None = None) -> float:
    """Mean node/edge similarity over the first ``m`` stages; 0 if identities diverge."""
    m = partial.n_stages if m is None else m
    if cand.n_stages < m or partial.signature(m)[0] != cand.signature(m)[0]:
        return 0.0
    pn = [n for n in partial.canonical_nodes() if n.stage < m]
    cn = [n for n in cand.canonical_nodes() if n.stage < m]
    sims = [node_similarity(a, b) for a, b in zip(pn, cn)]
    cedges = set(cand.canonical_edges())
    for a, b in partial.canonical_edges():
        if b >= len(pn):
            continue
        sims.append(edge_similarity(pn[b], cn[b]) if (a, b) in cedges else 0.0)
    return float(np.mean(sims)) if sims else 1.0


@dataclass(frozen=True)
class MatchResult:
    pattern: PatternGraph
    similarity: float
    matched_prefix_stages: int


def stage_share(pattern: PatternGraph, s: int) -> float:
    """Fraction of the pattern's execution time accumulated through stage ``s``."""
    if not 0 <= s < pattern.n_stages:
        raise IndexError(f"stage {s} outside pattern with {pattern.n_stages} stages")
    if s == pattern.n_stages - 1:
        return 1.0
    total = pattern.t_total
    if total <= 0:
        return (s + 1) / pattern.n_stages
    return min(1.0, sum(pattern.stage_times[: s + 1]) / total)


def stage_fraction(pattern: PatternGraph, s: int, mode: ShareMode | str) -> float:
    """The share a given mode assigns to stage ``s`` (used for error comparisons)."""
    mode = ShareMode(mode)
    if mode is ShareMode.CUMULATIVE:
        return stage_share(pattern, s)
    t = pattern.stage_times
    if mode is ShareMode.PER_STAGE:
        total = pattern.t_total
        return t[s] / total if total > 0 else 1.0 / pattern.n_stages
    rest = sum(t[s:])
    return t[s] / rest if rest > 0 else 1.0


def sub_deadline(pattern: PatternGraph, s: int, D: float, mode: ShareMode | str = ShareMode.CUMULATIVE) -> float:
    """Cumulative mode: deadline of stage ``s`` measured from the compound's start.
    The other two modes return the time budget of stage ``s`` itself (for the
    remaining-share mode ``D`` is the budget still unspent when the stage starts)."""
    if D <= 0:
        raise ValueError("D must be positive")
    return stage_fraction(pattern, s, mode) * D


def stage_deadline(pattern: PatternGraph | None, s: int, compound_start: float, stage_start: float,
                   D: float, mode: ShareMode | str = ShareMode.CUMULATIVE) -> float:
    """Absolute sub-deadline for stage ``s``; falls back to the overall deadline."""
    final = compound_start + D
    if pattern is None or s >= pattern.n_stages:
        return final
    mode = ShareMode(mode)
    if mode is ShareMode.CUMULATIVE:
        return compound_start + sub_deadline(pattern, s, D, mode)
    if mode is ShareMode.PER_STAGE:
        return min(final, stage_start + sub_deadline(pattern, s, D, mode))
    remaining = final - stage_start
    if remaining <= 0:
        return final
    return stage_start + sub_deadline(pattern, s, remaining, mode)


@dataclass
class PatternStore:
    decay_factor: float = DECAY_PER_HOUR
    eviction_threshold: float = 0.05
    capacity: int = 2000
    graphs: dict = field(default_factory=dict)     # id -> PatternGraph
    medoids: list = field(default_factory=list)    # ids
    vocab: dict = field(default_factory=dict)
    _next_id: int = 0
    _index: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.graphs)

    def _invalidate(self):
        self._index.clear()

    def _index_add(self, g: PatternGraph) -> None:
        for key in [k for k in self._index if k[0] == "built"]:
            m = key[1]
            if g.n_stages >= m:
                bkey = (m, g.signature(m)[0])
                self._index.setdefault(bkey, []).append(g)
                self._index.pop(("arr",) + bkey, None)

    def _index_remove(self, g: PatternGraph) -> None:
        for key in [k for k in self._index if k[0] == "built"]:
            m = key[1]
            if g.n_stages >= m:
                bkey = (m, g.signature(m)[0])
                bucket = self._index.get(bkey, [])
                if g in bucket:
                    bucket.remove(g)
                self._index.pop(("arr",) + bkey, None)

    # -- ingestion ---------------------------------------------------------
    def ingest(self, completed: PatternGraph, now: float = 0.0) -> PatternGraph:
        size = len(completed.pack(dict(self.vocab))) if len(completed.nodes) < 256 else completed.packed_size()
        if size >= MAX_PACKED_BYTES:
            raise OversizedPattern(f"pattern packs to {size} bytes (limit {MAX_PACKED_BYTES})")
        n = completed.n_stages
        for g in self._bucket(n, completed.signature(n)[0]):
            if g.n_stages == n and graph_similarity(completed, g, n) >= 1.0 - 1e-12:
                g.reuse_score += 1.0
                g.last_touch = now
                return g
        completed.pack(self.vocab)
        completed.id = self._next_id
        self._next_id += 1
        completed.reuse_score = 1.0
        completed.last_touch = now
        self.graphs[completed.id] = completed
        self._index_add(completed)
        if len(self.graphs) > self.capacity:
            victim = min(self.graphs.values(), key=lambda g: (g.reuse_score, -g.id))
            self.remove(victim.id)
        return completed

    def remove(self, gid: int) -> None:
        g = self.graphs.pop(gid)
        if gid in self.medoids:
            self.medoids.remove(gid)
        self._index_remove(g)

    def touch(self, pattern: PatternGraph, now: float) -> None:
        pattern.reuse_score += 1.0
        pattern.last_touch = now

    def decay_evict(self, now: float) -> int:
        """Decay reuse scores by 0.9 per elapsed hour; drop graphs under the threshold."""
        evicted = []
        for g in self.graphs.values():
            hours = max(0.0, now - g.last_touch) / 3600.0
            g.reuse_score *= self.decay_factor ** hours
            g.last_touch = now
            if g.reuse_score < self.eviction_threshold:
                evicted.append(g.id)
        for gid in evicted:
            self.remove(gid)
        return len(evicted)

    # -- matching -----------------------------------------------------------
    def _bucket(self, m: int, idents) -> list[PatternGraph]:
        if ("built", m) not in self._index:
            self._build_index(m)
        return self._index.get((m, idents), [])

    def _build_index(self, m: int) -> None:
        groups: dict = {}
        for g in sorted(self.graphs.values(), key=lambda g: g.id):
            if g.n_stages >= m:
                groups.setdefault((m, g.signature(m)[0]), []).append(g)
        self._index.update(groups)
        self._index[("built", m)] = True

    def match(self, partial: PatternGraph) -> MatchResult:
        m = partial.n_stages
        if m < 1:
            raise ValueError("partial graph needs at least one completed stage")
        stages, q_edges = partial.signature(m)
        cands = self._bucket(m, stages)
        if not cands:
            raise NoMatch("every stored pattern diverges from the revealed prefix")
        akey = ("arr", m, stages)
        if akey not in self._index:
            self._index[akey] = _group_arrays(cands, m)
        node_w, node_in, edge_masks = self._index[akey]
        pn = [n for n in partial.canonical_nodes() if n.stage < m]
        q_node = np.array([n.weight for n in pn])
        sims = _kernel_vec(node_w, q_node[None, :]).sum(axis=1)
        for e in q_edges:
            mask = edge_masks.get(e)
            if mask is not None:
                b = e[1]
                sims += np.where(mask, _kernel_vec(node_in[:, b], float(pn[b].input_len)), 0.0)
        sims /= len(pn) + len(q_edges)
        best = max(range(len(cands)), key=lambda i: (sims[i], cands[i].reuse_score, -cands[i].id))
        return MatchResult(cands[best], float(min(1.0, sims[best])), m)

    def prior_share(self, stage0_identities: tuple) -> PatternGraph | None:
        """Most reused stored pattern whose stage-0 identities equal the given ones."""
        cands = self._bucket(1, (tuple(stage0_identities),))
        if not cands:
            return None
        return max(cands, key=lambda g: (g.reuse_score, -g.id))

    # -- clustering ------------------------------------------------------------
    def distance_matrix(self, ids=None) -> tuple[list[int], np.ndarray]:
        ids = sorted(self.graphs) if ids is None else list(ids)
        n = len(ids)
        D = np.zeros((n, n))
        for i in range(n):
            gi = self.graphs[ids[i]]
            for j in range(i + 1, n):
                gj = self.graphs[ids[j]]
                if gi.n_stages != gj.n_stages:
                    sim = 0.0
                else:
                    sim = 0.5 * (graph_similarity(gi, gj) + graph_similarity(gj, gi))
                D[i, j] = D[j, i] = 1.0 - sim
        return ids, D

    def cluster(self, k: int, seed: int = 0) -> list[int]:
        if len(self.graphs) < k or k < 1:
            raise TooFewGraphs(f"cannot pick {k} medoids from {len(self.graphs)} graphs")
        ids, D = self.distance_matrix()
        med = pam(D, k, seed=seed)
        self.medoids = [ids[i] for i in med]
        return list(self.medoids)

    # -- persistence -------------------------------------------------------------
    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for gid in sorted(self.graphs):
                fh.write(json.dumps(self.graphs[gid].to_dict(), separators=(",", ":")) + "\n")

    @classmethod
    def load_jsonl(cls, path, **kw) -> PatternStore:
        store = cls(**kw)
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    g = PatternGraph.from_dict(json.loads(line))
                    g.pack(store.vocab)
                    store.graphs[g.id] = g
                    store._next_id = max(store._next_id, g.id + 1)
        return store


def _group_arrays(graphs: list[PatternGraph], m: int):
    prefix = [[n for n in g.canonical_nodes() if n.stage < m] for g in graphs]
    node_w = np.array([[n.weight for n in p] for p in prefix], dtype=float)
    node_in = np.array([[n.input_len for n in p] for p in prefix], dtype=float)
    n_prefix = node_w.shape[1]
    edge_masks: dict = {}
    for ci, g in enumerate(graphs):
        for e in g.canonical_edges():
            if e[1] < n_prefix:
                edge_masks.setdefault(e, np.zeros(len(graphs), dtype=bool))[ci] = True
    return node_w, node_in, edge_masks


def pam(D: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> list[int]:
    """Partitioning Around Medoids: greedy BUILD, then best-improvement SWAP
    until no single medoid/non-medoid exchange lowers the total distance."""
    n = len(D)
    if k >= n:
        return list(range(n))
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(n)  # deterministic tie order among equal-cost choices
    first = min(range(n), key=lambda i: (D[i].sum(), tiebreak[i]))
    medoids = [first]
    nearest = D[first].copy()
    while len(medoids) < k:
        gains = np.maximum(nearest[None, :] - D, 0.0).sum(axis=1)
        gains[medoids] = -1.0
        best = max(range(n), key=lambda i: (gains[i], -tiebreak[i]))
        medoids.append(best)
        nearest = np.minimum(nearest, D[best])
    cost = D[:, medoids].min(axis=1).sum()
    for _ in range(max_iter):
        best_move = None
        best_cost = cost
        for mi in range(k):
            others = medoids[:mi] + medoids[mi + 1:]
            base = D[:, others].min(axis=1) if others else np.full(n, np.inf)
            for h in range(n):
                if h in medoids:
                    continue
                c = np.minimum(base, D[:, h]).sum()
                if c < best_cost - 1e-12:
                    best_cost, best_move = c, (mi, h)
        if best_move is None:
            break
        medoids[best_move[0]] = best_move[1]
        cost = best_cost
    return sorted(medoids)


def pam_cost(D: np.ndarray, medoids) -> float:
    return float(D[:, list(medoids)].min(axis=1).sum())
