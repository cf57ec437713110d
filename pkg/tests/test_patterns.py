import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from goodsched.core import NodeKind
from goodsched.patterns import (NoMatch, OversizedPattern, PatternGraph, PatternStore, PNode,
                                ShareMode, TooFewGraphs, edge_similarity, gaussian_similarity,
                                graph_similarity, node_similarity, pam, pam_cost, stage_deadline,
                                stage_share, sub_deadline)
from goodsched.workload import pattern_families


def llm(stage, out=100, inp=50, name="llm-a"):
    return PNode(NodeKind.LLM, name, stage, inp, out)


def tool(stage, ms=500.0, name="search"):
    return PNode(NodeKind.TOOL, name, stage, exec_ms=ms)


def chain(times, outs=None, names=None):
    n = len(times)
    outs = outs or [100] * n
    names = names or ["llm-a"] * n
    nodes = [llm(s, outs[s], name=names[s]) for s in range(n)]
    return PatternGraph(nodes, [(s, s + 1) for s in range(n - 1)], list(times))


# --- kernels ----------------------------------------------------------------------

def test_identical_nodes():
    assert node_similarity(llm(0, 300), llm(0, 300)) == 1.0


def test_kind_mismatch():
    assert node_similarity(llm(0), tool(0)) == 0.0
    assert edge_similarity(llm(1), tool(1)) == 0.0


def test_one_sigma_apart():
    # sigma = 0.25 * max(100, 100 + sigma) -> sigma = 100/3
    sigma = 100 / 3
    assert gaussian_similarity(100, 100 + sigma) == pytest.approx(math.exp(-0.5))


@pytest.mark.invariant
@given(st.floats(0, 1e5), st.floats(0, 1e5))
def test_kernel_range_and_symmetry(a, b):
    s = gaussian_similarity(a, b)
    assert 0.0 <= s <= 1.0
    assert s == gaussian_similarity(b, a)


# --- shares -------------------------------------------------------------------------

def test_stage_share_examples():
    g = chain([2, 3, 5])
    assert stage_share(g, 1) == pytest.approx(0.5)
    assert stage_share(g, 2) == 1.0


def test_sub_deadline_examples():
    g = chain([2, 3, 5])
    assert sub_deadline(g, 1, 100, ShareMode.CUMULATIVE) == pytest.approx(50)
    assert sub_deadline(g, 1, 100, ShareMode.PER_STAGE) == pytest.approx(30)
    assert sub_deadline(g, 1, 100, ShareMode.REMAINING) == pytest.approx(100 * 3 / 8)


@pytest.mark.invariant
@given(st.lists(st.floats(0, 100), min_size=1, max_size=8), st.floats(0.1, 1e4))
def test_shares_monotone_and_bounded(times, D):
    g = chain(times)
    phis = [stage_share(g, s) for s in range(len(times))]
    assert all(a <= b + 1e-12 for a, b in zip(phis, phis[1:]))
    assert phis[-1] == 1.0
    for mode in ShareMode:
        for s in range(len(times)):
            assert sub_deadline(g, s, D, mode) <= D * (1 + 1e-12)


def test_stage_deadline_fallbacks():
    g = chain([1, 1])
    assert stage_deadline(None, 0, 10.0, 10.0, 40.0) == 50.0
    assert stage_deadline(g, 5, 10.0, 10.0, 40.0) == 50.0
    assert stage_deadline(g, 0, 10.0, 10.0, 40.0) == pytest.approx(30.0)


# --- store -----------------------------------------------------------------------------

def test_ingest_and_dedup():
    store = PatternStore()
    g = store.ingest(chain([1, 2, 3, 4, 5]))
    assert len(store) == 1 and g.reuse_score == 1.0
    again = store.ingest(chain([1, 2, 3, 4, 5]))
    assert len(store) == 1 and again is g and g.reuse_score == 2.0
    store.ingest(chain([1, 2, 3, 4, 5], outs=[100, 100, 100, 100, 900]))
    assert len(store) == 2


def test_oversized_pattern():
    nodes = [llm(s // 3) for s in range(200)]
    g = PatternGraph(nodes, [], [1.0] * 67)
    assert g.packed_size() >= 200
    with pytest.raises(OversizedPattern):
        PatternStore().ingest(g)


def test_generated_patterns_are_compact():
    for _, g in pattern_families(10, 3, seed=1):
        assert g.packed_size() < 200
        assert sum(g.stage_times) == pytest.approx(g.t_total, rel=1e-6)


def test_self_match():
    store = PatternStore()
    g = store.ingest(chain([1, 2, 3], outs=[10, 200, 30]))
    store.ingest(chain([1, 2, 3], outs=[500, 500, 500]))
    r = store.match(g.prefix(2))
    assert r.pattern is g and r.similarity == pytest.approx(1.0) and r.matched_prefix_stages == 2


def test_prefix_pruning_no_match():
    store = PatternStore()
    for k in range(3):
        g = PatternGraph([llm(0), llm(1), tool(2, name="browse")], [(0, 1), (1, 2)], [1, 1, 1])
        store.ingest(g)
    q = PatternGraph([llm(0), llm(1), tool(2, name="code")], [(0, 1), (1, 2)], [1, 1, 1])
    with pytest.raises(NoMatch):
        store.match(q)


def test_prefix_pruning_soundness():
    data = pattern_families(6, 5, seed=2, min_stages=3)
    store = PatternStore()
    for _, g in data:
        store.ingest(g)
    for _, g in data[:10]:
        for m in range(1, 3):
            p = g.prefix(m)
            survivors = [h for h in store.graphs.values() if graph_similarity(p, h, m) > 0]
            same = [h for h in store.graphs.values()
                    if h.n_stages >= m and h.signature(m)[0] == p.signature(m)[0]]
            assert {h.id for h in same} <= {h.id for h in survivors} | {h.id for h in same
                                                                       if graph_similarity(p, h, m) == 0}
            r = store.match(p)
            assert r.pattern.signature(m)[0] == p.signature(m)[0]


def test_match_agrees_with_scalar_similarity():
    data = pattern_families(8, 6, seed=3, min_stages=3)
    seen, held = set(), []
    store = PatternStore()
    for fam, g in data:
        if fam in seen:
            store.ingest(g)
        else:
            seen.add(fam)
            held.append(g)
    for q in held:
        p = q.prefix(2)
        r = store.match(p)
        best = max(graph_similarity(p, h, 2) for h in store.graphs.values())
        assert r.similarity == pytest.approx(best, abs=1e-9)


def test_match_tie_breaks_on_reuse_then_id():
    store = PatternStore()
    a = store.ingest(chain([1, 1], outs=[100, 100]))
    b = store.ingest(chain([1, 1], outs=[100, 300]))
    store.touch(b, 0.0)
    r = store.match(chain([1], outs=[100]))
    assert r.similarity == pytest.approx(1.0)
    assert r.pattern is b    # same similarity, higher reuse
    assert a.id < b.id


def test_decay_examples():
    store = PatternStore(eviction_threshold=0.95)
    store.ingest(chain([1, 1]), now=0.0)
    assert store.decay_evict(now=0.0) == 0
    assert store.decay_evict(now=3600.0) == 1
    store = PatternStore()
    g = store.ingest(chain([1, 1]), now=0.0)
    store.decay_evict(now=7200.0)
    assert g.reuse_score == pytest.approx(0.81)


def test_capacity_evicts_lowest_reuse():
    store = PatternStore(capacity=3)
    gs = [store.ingest(chain([1, 1], outs=[100, 100 * (k + 2)])) for k in range(3)]
    store.touch(gs[0], 0.0)
    store.ingest(chain([1, 1], outs=[100, 5000]))
    assert len(store) == 3 and gs[0].id in store.graphs


def test_jsonl_roundtrip(tmp_path):
    store = PatternStore()
    for _, g in pattern_families(4, 3, seed=4):
        store.ingest(g)
    path = tmp_path / "store.jsonl"
    store.save_jsonl(path)
    back = PatternStore.load_jsonl(path)
    assert sorted(back.graphs) == sorted(store.graphs)
    for gid, g in store.graphs.items():
        assert back.graphs[gid].to_dict() == g.to_dict()


# --- clustering ---------------------------------------------------------------------------

def test_cluster_needs_graphs():
    with pytest.raises(TooFewGraphs):
        PatternStore().cluster(2)


def test_k_equals_n():
    D = np.array([[0, 1, 2], [1, 0, 1], [2, 1, 0]], dtype=float)
    med = pam(D, 3)
    assert med == [0, 1, 2] and pam_cost(D, med) == 0


def test_two_families_one_medoid_each():
    store = PatternStore()
    for k in range(8):
        store.ingest(chain([1, 1, 1], outs=[100 + k, 100, 100]))
        store.ingest(PatternGraph([llm(0), tool(1, 400 + k)], [(0, 1)], [1, 1]))
    med = store.cluster(2)
    kinds = {store.graphs[m].n_stages for m in med}
    assert kinds == {2, 3}
    ids, D = store.distance_matrix()
    idx = [ids.index(m) for m in med]
    brute = min(pam_cost(D, pair) for pair in itertools.combinations(range(len(ids)), 2))
    assert pam_cost(D, idx) == pytest.approx(brute)


@given(st.integers(4, 14), st.integers(1, 4), st.integers(0, 10_000))
def test_pam_swap_stable(n, k, seed):
    rng = np.random.default_rng(seed)
    P = rng.random((n, 2))
    D = np.sqrt(((P[:, None] - P[None]) ** 2).sum(-1))
    med = pam(D, k, seed=seed)
    cost = pam_cost(D, med)
    for i in range(len(med)):
        for h in range(n):
            if h in med:
                continue
            alt = med[:i] + [h] + med[i + 1:]
            assert pam_cost(D, alt) >= cost - 1e-9
