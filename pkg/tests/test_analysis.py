import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goodsched.analysis import (BoundParams, SmallInstance, SmallRequest, TooLarge,
                                analytic_bound_curve, bound_value, brute_force_goodput,
                                edf_adversary, instance_requests, optimize_bound, oracle_schedule,
                                random_instance, simulate_instance, sjf_adversary)


# --- bound ----------------------------------------------------------------------------------

def test_bound_examples():
    assert bound_value(BoundParams(1.0, 0.47, 0.47, 0.0)) == 0.0
    assert bound_value(BoundParams(1.0, 0.47, 0.47, 0.06)) == pytest.approx(0.1175)


def test_bound_linear_in_p():
    a = bound_value(BoundParams(0.8, 0.4, 0.4, 0.2, 1.0))
    assert bound_value(BoundParams(0.8, 0.4, 0.4, 0.2, 0.95)) == pytest.approx(0.95 * a)


def test_bound_params_validation():
    with pytest.raises(ValueError):
        BoundParams(1.0, 0.6, 0.6, 0.0)
    with pytest.raises(ValueError):
        BoundParams(0.0, 0.1, 0.1, 0.1)


def test_optimum_matches_closed_form():
    val, arg = optimize_bound(1.0, 200)
    d = np.linspace(1e-4, 3, 300_001)
    assert val == pytest.approx(analytic_bound_curve(d).max(), rel=1e-6)
    assert val == pytest.approx(bound_value(arg), rel=1e-9)
    assert val == pytest.approx(0.121593, abs=1e-6)
    assert arg.alpha == pytest.approx(arg.beta, abs=1e-6)


def test_p095_scales_and_fixed_delta_is_worse():
    v1, _ = optimize_bound(1.0, 120)
    v95, _ = optimize_bound(0.95, 120)
    assert v95 == pytest.approx(0.95 * v1, rel=1e-9)
    vfix, arg = optimize_bound(1.0, 120, fixed_delta=0.1)
    assert arg.delta == 0.1 and vfix < v1


# --- adversaries ---------------------------------------------------------------------------------

def test_edf_adversary_shape():
    inst = edf_adversary(10, 1, 100)
    assert len(inst.requests) == 2 and inst.meta["delta"] == 5.0
    inst = edf_adversary(10, 9, 100)
    assert [r.arrival for r in inst.requests[1:]] == pytest.approx(list(np.arange(1, 10) * 1.0))


def test_edf_and_sjf_lose_to_oracle():
    for build, pol in ((edf_adversary, "edf"), (sjf_adversary, "sjf_oracle")):
        inst = build(10, 9, 100)
        assert simulate_instance(inst, pol) == pytest.approx(9)
        assert oracle_schedule(inst).goodput == 100
        assert simulate_instance(inst, "gmax") >= 100


def test_ratio_grows_with_m():
    for M in (10, 1000):
        inst = edf_adversary(10, 9, M)
        assert oracle_schedule(inst).goodput / simulate_instance(inst, "edf") == pytest.approx(M / 9)


def test_small_m_sjf_agrees_with_oracle():
    inst = sjf_adversary(10, 9, 0.5)
    assert simulate_instance(inst, "sjf_oracle") == pytest.approx(oracle_schedule(inst).goodput)


def test_adversary_trace_lengths():
    reqs = instance_requests(edf_adversary(10, 9, 100))
    assert reqs[0].output_len == 99 and reqs[1].output_len == 9
    assert sum(reqs[0].weights) * reqs[0].output_len == pytest.approx(100)


# --- oracle --------------------------------------------------------------------------------------

def req(i, a, c, d, g):
    return SmallRequest(i, a, c, d, g)


def test_oracle_single():
    assert oracle_schedule(SmallInstance(1, [req(0, 0, 1, 2, 7)])).goodput == 7


def test_oracle_mutual_exclusion():
    inst = SmallInstance(1, [req(0, 0, 5, 5, 3), req(1, 0, 5, 5, 4)])
    res = oracle_schedule(inst)
    assert res.goodput == 4 and res.chosen == (1,)
    assert oracle_schedule(inst, preemptive=False).goodput == 4


def test_oracle_cap():
    inst = SmallInstance(1, [req(i, 0, 1, 100, 1) for i in range(13)])
    with pytest.raises(TooLarge):
        oracle_schedule(inst)


def test_preemption_helps_oracle():
    # the short job lands inside the long one's window: only preemption fits both
    inst = SmallInstance(1, [req(0, 0, 4, 5, 5), req(1, 1, 1, 2, 1)])
    assert oracle_schedule(inst).goodput == 6
    assert oracle_schedule(inst, preemptive=False).goodput == 5


def test_nonpreemptive_schedule_is_valid():
    rng = np.random.default_rng(4)
    for _ in range(20):
        inst = random_instance(rng, 7, 2)
        res = oracle_schedule(inst, preemptive=False)
        by_id = {r.id: r for r in inst.requests}
        total = 0.0
        for ids in res.schedule.values():
            t = 0.0
            for i in ids:
                r = by_id[i]
                t = max(t, r.arrival) + r.t_comp
                assert t <= r.deadline + 1e-9
                total += r.goodput
        assert total == pytest.approx(res.goodput)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_branch_and_bound_matches_brute_force(seed):
    inst = random_instance(np.random.default_rng(seed), 7, 2)
    assert oracle_schedule(inst).goodput == pytest.approx(brute_force_goodput(inst))
    assert oracle_schedule(inst, False).goodput == pytest.approx(brute_force_goodput(inst, False))
    assert oracle_schedule(inst, False).goodput <= oracle_schedule(inst).goodput + 1e-9


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_oracle_dominates_policies(seed):
    inst = random_instance(np.random.default_rng(seed), 10, 2)
    opt = oracle_schedule(inst).goodput
    for pol in ("gmax", "fcfs", "edf", "sjf_oracle", "ltr", "plas"):
        assert simulate_instance(inst, pol) <= opt + 1e-6
