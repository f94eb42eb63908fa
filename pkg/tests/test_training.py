import csv
import math

import numpy as np
import pytest

from deferqa.core import CostParams, LogArrays
from deferqa.errors import ConfigError, DimensionMismatch, EmptyDataset, NonFiniteLoss, TauOutOfRange
from deferqa.oracle import sample_log
from deferqa.presets import ACCEPTANCE_COSTS, acceptance_world
from deferqa.rejector import JOINT, LINEAR, MLP, decide_batch, init_model, models_equal
from deferqa.training import (
    CONSTANT,
    TrainConfig,
    canonical_order,
    epoch_means,
    grad_check,
    schedule_lr,
    train,
    write_trace,
)

from conftest import make_record, random_record


@pytest.fixture(scope="module")
def acceptance_log():
    return sample_log(acceptance_world(), 4000, seed=3)


def expert_always_right(rng, n=600):
    recs = []
    for i in range(n):
        x = rng.normal(size=2)
        recs.append(make_record(f"q{i:04d}", (2, 5), [(1, 4), (2, 5)], features=x))
    return recs


class TestConfig:
    @pytest.mark.parametrize(
        "field,value",
        [("epochs", 0), ("batch_size", 0), ("learning_rate", 0.0), ("warmup_fraction", 1.5),
         ("momentum", 1.0), ("schedule", "cosine"), ("nu", -1.0)],
    )
    def test_rejected(self, field, value):
        cfg = TrainConfig(CostParams((1.0,), (0.0,)), **{field: value})
        with pytest.raises(ConfigError):
            cfg.validate()


class TestSchedule:
    cfg = TrainConfig(CostParams((1.0,), (0.0,)), learning_rate=0.1, warmup_fraction=0.1)

    def test_ramp(self):
        assert schedule_lr(0, 100, self.cfg) == 0.0
        assert schedule_lr(5, 100, self.cfg) == pytest.approx(0.05)
        assert schedule_lr(10, 100, self.cfg) == pytest.approx(0.1)

    def test_last_step(self):
        # 90 decay steps; one remaining
        assert schedule_lr(99, 100, self.cfg) == pytest.approx(0.1 / 90)

    def test_constant(self):
        cfg = TrainConfig(CostParams((1.0,), (0.0,)), learning_rate=0.1, schedule=CONSTANT)
        assert {schedule_lr(s, 50, cfg) for s in range(50)} == {0.1}

    def test_no_warmup(self):
        cfg = TrainConfig(CostParams((1.0,), (0.0,)), learning_rate=0.1, warmup_fraction=0.0)
        assert schedule_lr(0, 10, cfg) == pytest.approx(0.1)


class TestTrain:
    def test_learns_always_right_expert(self, rng):
        recs = expert_always_right(rng)
        cfg = TrainConfig(CostParams((1.0,), (0.0,)), epochs=5, learning_rate=0.05, seed=1)
        model, _ = train(recs, init_model(LINEAR, 2, 2, seed=0), cfg)
        arr = LogArrays.from_records(recs)
        choice = decide_batch(model.score_batch(arr.features), JOINT)[:, 0]
        assert np.mean(choice == 1) >= 0.99

    def test_deterministic(self, acceptance_log):
        cfg = TrainConfig(ACCEPTANCE_COSTS, epochs=2, seed=4)
        m0 = init_model(LINEAR, 2, 3, seed=0)
        a, ta = train(acceptance_log, m0, cfg)
        b, tb = train(acceptance_log, m0, cfg)
        assert models_equal(a, b)
        assert ta == tb

    def test_input_model_untouched(self, acceptance_log):
        m0 = init_model(LINEAR, 2, 3, seed=0)
        before = m0.copy()
        train(acceptance_log[:200], m0, TrainConfig(ACCEPTANCE_COSTS, epochs=1))
        assert models_equal(before, m0)

    def test_order_invariance(self, acceptance_log):
        cfg = TrainConfig(ACCEPTANCE_COSTS, epochs=1, seed=4)
        m0 = init_model(LINEAR, 2, 3, seed=0)
        shuffled = list(acceptance_log)
        np.random.default_rng(0).shuffle(shuffled)
        a, _ = train(acceptance_log, m0, cfg)
        b, _ = train(shuffled, m0, cfg)
        assert models_equal(a, b)
        assert [r.query_id for r in canonical_order(shuffled)] == sorted(r.query_id for r in shuffled)

    def test_monotone_epoch_means_and_nonnegative(self, acceptance_log):
        cfg = TrainConfig(ACCEPTANCE_COSTS, epochs=6, learning_rate=1e-2, seed=2)
        _, trace = train(acceptance_log, init_model(LINEAR, 2, 3, seed=0), cfg)
        means = epoch_means(trace)
        for prev, cur in zip(means, means[1:]):
            assert cur <= prev * 1.01
        assert all(row.mean_loss >= 0 and math.isfinite(row.mean_loss) for row in trace)
        assert len(trace) == 6 * math.ceil(len(acceptance_log) / 32)

    def test_mlp_pin_zero_stays_pinned(self, acceptance_log):
        cfg = TrainConfig(ACCEPTANCE_COSTS, epochs=1, learning_rate=1e-2)
        m, _ = train(acceptance_log[:500], init_model(MLP, 2, 3, seed=0, hidden=8, pin_zero=True), cfg)
        assert not m.weights["W2"][:, 0].any() and not m.weights["b2"][:, 0].any()

    def test_errors(self, acceptance_log):
        cfg = TrainConfig(ACCEPTANCE_COSTS, epochs=1)
        with pytest.raises(EmptyDataset):
            train([], init_model(LINEAR, 2, 3, seed=0), cfg)
        with pytest.raises(DimensionMismatch):
            train(acceptance_log, init_model(LINEAR, 3, 3, seed=0), cfg)
        with pytest.raises(DimensionMismatch):
            train(acceptance_log, init_model(LINEAR, 2, 4, seed=0), cfg)
        with pytest.raises(TauOutOfRange):
            train(acceptance_log, init_model(LINEAR, 2, 3, seed=0),
                  TrainConfig(CostParams((1.0, 1.0), (0.2, 0.2)), epochs=1))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_guard(self, acceptance_log):
        m0 = init_model(LINEAR, 2, 3, seed=0)
        m0.weights["W"] *= 1e6
        # with nu = 0 the surrogate grows like exp(margin) and overflows
        with pytest.raises(NonFiniteLoss) as info:
            train(acceptance_log[:64], m0, TrainConfig(ACCEPTANCE_COSTS, epochs=1, nu=0.0))
        assert info.value.step == 0

    def test_trace_csv(self, acceptance_log, tmp_path):
        _, trace = train(acceptance_log[:100], init_model(LINEAR, 2, 3, seed=0), TrainConfig(ACCEPTANCE_COSTS, epochs=1))
        path = tmp_path / "trace.csv"
        write_trace(trace, path, comment="hello")
        lines = path.read_text().splitlines()
        assert lines[0] == "# hello"
        rows = list(csv.reader(lines[1:]))
        assert rows[0] == ["step", "epoch", "lr", "mean_loss"]
        assert float(rows[-1][3]) == trace[-1].mean_loss


class TestGradCheck:
    @pytest.mark.parametrize("nu", [1.0, 2.0, 0.5, 4.0])
    @pytest.mark.parametrize("arch", [LINEAR, MLP])
    def test_small_error(self, nu, arch, rng):
        batch = [random_record(rng, 3, dim=4, qid=str(i)) for i in range(16)]
        model = init_model(arch, 4, 3, seed=5, hidden=8)
        cfg = TrainConfig(CostParams((0.7, 0.5), (0.2, 0.3)), nu=nu)
        assert grad_check(model, batch, cfg) < 1e-5

    def test_zero_tau(self, rng):
        batch = [make_record(str(i), (1, 2), [(0, 0)] * 3, features=rng.normal(size=2)) for i in range(8)]
        cfg = TrainConfig(CostParams((1.0, 1.0), (0.0, 0.0)))
        assert grad_check(init_model(LINEAR, 2, 3, seed=0), batch, cfg) == 0.0

    def test_epsilon_range(self, rng):
        batch = [random_record(rng, 2, dim=2)]
        with pytest.raises(ValueError):
            grad_check(init_model(LINEAR, 2, 2, seed=0), batch, TrainConfig(CostParams((1.0,), (0.0,))), epsilon=1e-2)
