import os
import sys

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_forest():
    """A quick forest over chatbot/deepresearch rows, shared across tests."""
    from goodsched.engine import training_rows
    from goodsched.estimator import ForestParams, fit_forest
    from goodsched.workload import WorkloadConfig, generate

    reqs = generate(WorkloadConfig(kind="poisson", count=600, seed=7))
    rows = training_rows(reqs, 50, max_rounds=4)
    return fit_forest(rows, ForestParams(n_trees=10, max_depth=8, min_leaf=5, seed=3))



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
