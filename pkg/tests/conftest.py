import numpy as np
import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}

CRITERIA = {
    1: "oracle equivalence of fast forward passes",
    2: "analytic gradients match finite differences",
    3: "cost accounting equals enumeration; MACs within 1% of table values",
    4: "input MACs = L'*|scales|; doubling L' scales MACs by [2.0, 2.2]",
    5: "synthetic burst task reaches >=95% held-out accuracy in >=8/10 seeds",
    6: "cumulative attribution argmax equals the burst scale in >=8/10 seeds",
    7: "epoch < 10 s and single-sample inference < 5 ms, single-threaded",
    8: "bit-exact round trips and worker-count-independent metrics",
}


@pytest.fixture
def record():
    def _record(n, passed, detail=""):
        ACCEPTANCE[n] = (bool(passed), detail)
        return passed
    return _record


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in CRITERIA.items():
        if n not in ACCEPTANCE:
            terminalreporter.write_line(f"[ NOT RUN ] {n}. {title}")
            continue
        ok, detail = ACCEPTANCE[n]
        tag = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[ {tag:^7} ] {n}. {title} :: {detail}")
