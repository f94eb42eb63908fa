
import numpy as np
import pytest

from deferqa.core import NO_ANSWER, SpanPair
from deferqa.errors import (
    BadDimension,
    ChecksumMismatch,
    DimensionMismatch,
    FormatVersionMismatch,
    IoError,
)
from deferqa.rejector import (
    JOINT,
    LINEAR,
    MLP,
    PER_HEAD,
    ConstantRejector,
    allocate,
    decide_batch,
    decide_joint,
    decide_per_head,
    init_model,
    load_model,
    models_equal,
    save_model,
)

from conftest import make_record


def naive_linear(model, x):
    W, b = model.weights["W"], model.weights["b"]
    out = np.zeros((2, model.num_agents))
    for i in range(2):
        for k in range(model.num_agents):
            acc = b[i, k]
            for t in range(model.input_dim):
                acc += W[i, k, t] * x[t]
            out[i, k] = acc
    return out


def naive_mlp(model, x):
    w = model.weights
    out = np.zeros((2, model.num_agents))
    for i in range(2):
        h = [max(0.0, w["b1"][i, a] + sum(w["W1"][i, a, t] * x[t] for t in range(len(x)))) for a in range(model.hidden)]
        for k in range(model.num_agents):
            out[i, k] = w["b2"][i, k] + sum(w["W2"][i, k, a] * h[a] for a in range(model.hidden))
    return out


class TestInit:
    def test_deterministic(self):
        a = init_model(LINEAR, 4, 3, seed=11)
        b = init_model(LINEAR, 4, 3, seed=11)
        assert models_equal(a, b)
        assert not models_equal(a, init_model(LINEAR, 4, 3, seed=12))

    def test_bounds_and_zero_bias(self):
        m = init_model(LINEAR, 16, 3, seed=0)
        assert np.abs(m.weights["W"]).max() <= 0.25
        assert not m.weights["b"].any()

    @pytest.mark.parametrize("d,n", [(0, 3), (4, 1)])
    def test_bad_dimension(self, d, n):
        with pytest.raises(BadDimension):
            init_model(LINEAR, d, n, seed=0)

    def test_pin_zero(self, rng):
        m = init_model(MLP, 3, 3, seed=0, hidden=5, pin_zero=True)
        s = m.score_batch(rng.normal(size=(10, 3)))
        assert not s[..., 0].any()


class TestScore:
    def test_linear_matches_loops(self, rng):
        m = init_model(LINEAR, 5, 4, seed=3)
        m.weights["b"][:] = rng.normal(size=(2, 4))
        for _ in range(10):
            x = rng.normal(size=5)
            rs, re = m.score(x)
            np.testing.assert_allclose(np.stack([rs, re]), naive_linear(m, x), rtol=1e-12)

    def test_mlp_matches_loops(self, rng):
        m = init_model(MLP, 3, 3, seed=3, hidden=6)
        for _ in range(10):
            x = rng.normal(size=3)
            np.testing.assert_allclose(np.stack(m.score(x)), naive_mlp(m, x), rtol=1e-12, atol=1e-14)

    def test_bitwise_repeatable(self, rng):
        m = init_model(LINEAR, 4, 3, seed=3)
        x = rng.normal(size=(7, 4))
        assert np.array_equal(m.score_batch(x), m.score_batch(x.copy()))

    def test_wrong_dim(self):
        m = init_model(LINEAR, 4, 3, seed=3)
        with pytest.raises(DimensionMismatch):
            m.score(np.zeros(5))

    @pytest.mark.parametrize("arch", [LINEAR, MLP])
    def test_backward_fd(self, arch, rng):
        m = init_model(arch, 3, 3, seed=1, hidden=4)
        x = rng.normal(size=(5, 3))
        g = rng.normal(size=(5, 2, 3))
        analytic = np.concatenate([v.ravel() for v in (m.backward(x, g)[k] for k in m.param_names)])
        theta = m.flat()
        h = 1e-6
        for c in range(theta.size):
            up, dn = theta.copy(), theta.copy()
            up[c] += h
            dn[c] -= h
            num = (np.sum(g * m.with_flat(up).score_batch(x)) - np.sum(g * m.with_flat(dn).score_batch(x))) / (2 * h)
            assert num == pytest.approx(analytic[c], rel=1e-5, abs=1e-7)


class TestDecisions:
    def test_per_head(self):
        assert decide_per_head([0.1, 0.9, 0.0]) == 1
        assert decide_per_head([0.5, 0.5, 0.1]) == 0
        assert decide_per_head([0.2, 0.7, 0.7]) == 1

    def test_joint_sum_differs_from_heads(self):
        # per-head would pick (0, 1) but the summed preference favours agent 2
        assert decide_joint([1.0, 0.0, 0.9], [0.0, 1.0, 0.9]) == 2

    def test_joint_shape(self):
        with pytest.raises(DimensionMismatch):
            decide_joint([1, 2], [1, 2, 3])

    def test_batch_agrees(self, rng):
        s = rng.normal(size=(50, 2, 4))
        ph, jt = decide_batch(s, PER_HEAD), decide_batch(s, JOINT)
        for n in range(50):
            assert tuple(ph[n]) == (decide_per_head(s[n, 0]), decide_per_head(s[n, 1]))
            assert jt[n, 0] == jt[n, 1] == decide_joint(s[n, 0], s[n, 1])


class TestAllocate:
    def test_constant_rejector(self):
        r = make_record("a", (3, 7), [(1, 2), (3, 7), (4, 9)], features=(0.5, 0.1))
        for k in range(3):
            a = allocate(ConstantRejector(k, 3), r, JOINT)
            assert a.agents == (k, k) and a.span == r.predictions[k]

    def test_per_head_composite(self):
        m = init_model(LINEAR, 2, 2, seed=0)
        m.weights["W"][:] = 0
        m.weights["b"][:] = [[1.0, 0.0], [0.0, 1.0]]
        r = make_record("a", (3, 7), [(3, 6), (4, 7)])
        a = allocate(m, r, PER_HEAD)
        assert a.agents == (0, 1) and a.span == SpanPair(3, 7)
        r2 = make_record("b", (3, 7), [(3, 6), (-1, -1)])
        assert allocate(m, r2, PER_HEAD).span == NO_ANSWER

    def test_agent_mismatch(self):
        with pytest.raises(DimensionMismatch):
            allocate(init_model(LINEAR, 2, 3, seed=0), make_record("a", (1, 2), [(1, 2)] * 2), JOINT)


class TestPersistence:
    @pytest.mark.parametrize("arch", [LINEAR, MLP])
    def test_round_trip(self, arch, tmp_path, rng):
        m = init_model(arch, 4, 3, seed=9, hidden=7, pin_zero=(arch == MLP))
        path = tmp_path / "m.bin"
        save_model(m, path, meta={"note": "x"})
        back = load_model(path)
        assert models_equal(m, back)
        x = rng.normal(size=(6, 4))
        assert np.array_equal(m.score_batch(x), back.score_batch(x))

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.bin"
        save_model(init_model(LINEAR, 4, 3, seed=9), path)
        data = path.read_bytes()
        path.write_bytes(data[:-40])
        with pytest.raises(ChecksumMismatch):
            load_model(path)

    def test_corrupted_payload(self, tmp_path):
        path = tmp_path / "m.bin"
        save_model(init_model(LINEAR, 4, 3, seed=9), path)
        data = bytearray(path.read_bytes())
        data[-40] ^= 0xFF
        path.write_bytes(bytes(data))
        with pytest.raises(ChecksumMismatch):
            load_model(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "m.bin"
        save_model(init_model(LINEAR, 4, 3, seed=9), path)
        path.write_bytes(path.read_bytes().replace(b'"format_version": 1', b'"format_version": 9'))
        with pytest.raises(FormatVersionMismatch):
            load_model(path)

    def test_not_a_model(self, tmp_path):
        path = tmp_path / "m.bin"
        path.write_bytes(b"hello")
        with pytest.raises(FormatVersionMismatch):
            load_model(path)

    def test_unwritable(self, tmp_path):
        with pytest.raises(IoError):
            save_model(init_model(LINEAR, 2, 2, seed=0), tmp_path / "missing" / "m.bin")
        with pytest.raises(IoError):
            load_model(tmp_path / "nope.bin")

    def test_identical_bytes(self, tmp_path):
        m = init_model(LINEAR, 4, 3, seed=9)
        save_model(m, tmp_path / "a.bin")
        save_model(m.copy(), tmp_path / "b.bin")
        assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
