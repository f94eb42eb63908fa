import numpy as np
import pytest

from deferqa.core import AgentPredictionRecord, CostParams, SpanPair


def make_record(qid, gold, preds, features=(0.0, 0.0)):
    return AgentPredictionRecord(
        qid, tuple(float(f) for f in features), SpanPair(*gold), tuple(SpanPair(*p) for p in preds)
    )


def random_record(rng, num_agents, dim=3, qid="q"):
    gold = (int(rng.integers(0, 20)), int(rng.integers(20, 40)))
    preds = []
    for _ in range(num_agents):
        s = gold[0] if rng.random() < 0.5 else gold[0] + 1
        e = gold[1] if rng.random() < 0.5 else gold[1] + 1
        preds.append((s, e))
    return make_record(qid, gold, preds, rng.normal(size=dim))


def random_strict_params(rng, num_experts, gflops=False):
    alpha = rng.uniform(0, 1, num_experts)
    beta = rng.uniform(0, 1 - alpha)
    kw = {"gflops": tuple(rng.uniform(1, 100, num_experts + 1))} if gflops else {}
    return CostParams(tuple(alpha), tuple(beta), **kw)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
