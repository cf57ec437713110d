import numpy as np
import pytest
from hypothesis import given, strategies as st

from goodsched.core import SloClass, SloKind, to_us
from goodsched.engine import RequestRecord, SimResult, SubRecord
from goodsched.metrics import (GoodputLevel, GoodputSpec, goodput_report, latency_stats,
                               percentile, record_goodput, request_goodput, token_goodput)


def lat_rec(token_s, ttft=2.0, tbt=0.1, rid=0, lo=None, arrival=0.0):
    toks = np.array([to_us(arrival + t) for t in token_s], dtype=np.int64)
    return RequestRecord(rid, SloKind.LATENCY, arrival, SloClass.latency(ttft, tbt), 5,
                         lo if lo is not None else len(toks), (1, 1), "chatbot", tokens_us=toks,
                         completion_us=int(toks[-1]) if len(toks) else None)


def ddl_rec(li, lo, done_s, e2el=20.0, rid=0):
    toks = np.array([to_us(done_s)], dtype=np.int64)
    return RequestRecord(rid, SloKind.DEADLINE, 0.0, SloClass.deadline(e2el), li, lo, (1, 1),
                         "chatbot", tokens_us=toks, completion_us=to_us(done_s))


def comp_rec(done_s, e2el=60.0, rid=0, n=3):
    subs = [SubRecord(i, "llm-a", 10, 10, to_us(i * 10.0),
                      np.array([to_us(i * 10.0 + 1.0 + k) for k in range(10)], dtype=np.int64),
                      to_us(i * 10.0 + 10.0)) for i in range(n)]
    return RequestRecord(rid, SloKind.COMPOUND, 0.0, SloClass.compound(e2el), 30, 30, (1, 1),
                         "deepresearch", subs=subs, completion_us=to_us(done_s))


def result(*recs):
    return SimResult("gmax", list(recs), sim_time_us=to_us(100.0))


def test_all_tokens_on_time():
    assert token_goodput(result(lat_rec([1.0 + 0.1 * i for i in range(10)]))) == 10


def test_late_deadline_request_earns_nothing():
    assert token_goodput(result(ddl_rec(100, 50, 21.0))) == 0
    assert token_goodput(result(ddl_rec(100, 50, 19.0))) == 150


def test_compound_sum():
    assert token_goodput(result(comp_rec(45.0))) == 60
    assert token_goodput(result(comp_rec(61.0))) == 0


def test_best_effort_earns_nothing():
    r = ddl_rec(10, 10, 1.0)
    r.kind, r.slo = SloKind.BEST_EFFORT, SloClass.best_effort(300)
    assert token_goodput(result(r)) == 0


def test_dropped_earns_nothing():
    r = ddl_rec(10, 10, 1.0)
    r.dropped = True
    assert token_goodput(result(r)) == 0


def test_partial_latency_credit():
    # token i due at 2 + 0.1 i; tokens 0..4 on time, 5..9 late
    toks = [1.0 + 0.1 * i for i in range(5)] + [10.0 + i for i in range(5)]
    assert token_goodput(result(lat_rec(toks))) == 5


def test_request_level():
    ok = lat_rec([1.0 + 0.1 * i for i in range(10)], rid=0)
    one_late = lat_rec([1.0 + 0.1 * i for i in range(9)] + [50.0], rid=1)
    assert request_goodput(result(ok, one_late)) == 1
    assert request_goodput(result()) == 0
    spec = GoodputSpec(GoodputLevel.REQUEST)
    assert token_goodput(result(ok, ddl_rec(1, 1, 1.0, rid=2)), spec) == 2


def test_unfinished_latency_request_fails_request_level():
    r = lat_rec([1.0, 1.1], lo=5)
    assert request_goodput(result(r)) == 0
    assert token_goodput(result(r)) == 2


def test_weights_override():
    spec = GoodputSpec(weights=(0, 2))
    assert record_goodput(ddl_rec(100, 50, 1.0), spec) == 100
    with pytest.raises(ValueError):
        GoodputSpec(weights=(0, 0))


def test_latency_examples():
    s = latency_stats(result(lat_rec([1.0, 2.0, 3.0])))
    assert s["ttft_p50"] == s["ttft_p95"] == pytest.approx(1.0)
    assert s["tbt_p50"] == s["tbt_p95"] == pytest.approx(1.0)
    assert latency_stats(result(comp_rec(45.0)))["e2el_p50"] == pytest.approx(45.0)


def test_percentile_nearest_rank():
    assert percentile([], 50) is None
    assert percentile([3, 1, 2, 4], 50) == 2
    assert percentile(range(1, 101), 95) == 95


def test_report_breakdown_sums_to_total():
    recs = [lat_rec([1.0, 1.1, 1.2], rid=0), ddl_rec(10, 5, 3.0, rid=1), comp_rec(45.0, rid=2)]
    rep = goodput_report(result(*recs))
    assert rep.total_goodput == sum(rep.by_class.values()) == 3 + 15 + 60
    assert 0 <= rep.attainment <= 1 and rep.n_requests == 3
    csv = rep.to_csv().splitlines()
    assert csv[0] == "policy,metric,value" and "gmax,total_goodput,78.0" in csv


@pytest.mark.invariant
@given(st.lists(st.floats(0.01, 5), min_size=1, max_size=30), st.floats(0.1, 3), st.floats(1, 4))
def test_goodput_monotone_in_slo_scale(gaps, lam1, ratio):
    times = np.cumsum(gaps)
    base = SloClass.latency(1.0, 0.2)
    vals = []
    for lam in (lam1, lam1 * ratio):
        r = lat_rec(times)
        r.slo = base.scaled(lam)
        vals.append(token_goodput(result(r)))
    assert vals[0] <= vals[1]
