import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fovseg import tensor as T
from fovseg.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from fovseg.errors import ContractError
from fovseg.optim import NonFiniteGradient, OptimState, adam_step, poly_lr

from oracles import adam_scalar, conv2d_loops, cross_entropy_scalar, finite_difference


def grad_check(build, tensors, rng, n_probe=6, eps=1e-4, rtol=1e-3, atol=1e-7):
    """Compare analytic gradients of a scalar-valued ``build()`` with central differences."""
    for t in tensors:
        t.zero_grad()
    out = build()
    out.backward()
    for t in tensors:
        flat = t.values.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_probe, flat.size), replace=False):
            idx = np.unravel_index(i, t.shape)
            num = finite_difference(lambda: float(build().values), t.values, idx, eps)
            ana = t.grad[idx]
            assert abs(ana - num) <= atol + rtol * max(abs(ana), abs(num)), (t.name, idx, ana, num)


def weighted_sum(y, rng_seed=0):
    r = np.random.default_rng(rng_seed).normal(size=y.shape)
    return T.total(T.mul(y, r))


class TestConv2d:
    def test_identity_1x1(self):
        x = T.DiffTensor(np.full((1, 1, 1, 1), 0.37))
        w = T.DiffTensor(np.ones((1, 1, 1, 1)))
        np.testing.assert_array_equal(T.conv2d(x, w).values, x.values)

    def test_zero_weights(self):
        rng = np.random.default_rng(1)
        x = T.parameter(rng.normal(size=(2, 5, 5, 3)))
        w = T.parameter(np.zeros((3, 3, 3, 4)))
        y = T.conv2d(x, w, padding=1)
        assert not y.values.any()
        T.total(y).backward()
        assert not x.grad.any()

    def test_matches_loops_5x5(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 5, 5, 1))
        w = rng.normal(size=(3, 3, 1, 1))
        np.testing.assert_allclose(T.conv2d(T.DiffTensor(x), T.DiffTensor(w), padding=1).values,
                                   conv2d_loops(x, w, padding=1), atol=1e-6)

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
    def test_matches_loops_configs(self, stride, padding):
        rng = np.random.default_rng(stride * 10 + padding)
        x = rng.normal(size=(2, 7, 6, 3))
        w = rng.normal(size=(3, 3, 3, 2))
        got = T.conv2d(T.DiffTensor(x), T.DiffTensor(w), stride, padding).values
        np.testing.assert_allclose(got, conv2d_loops(x, w, stride, padding), atol=1e-9)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradients(self, stride):
        rng = np.random.default_rng(3)
        x = T.parameter(rng.normal(size=(2, 6, 5, 2)), name="x")
        w = T.parameter(rng.normal(size=(3, 3, 2, 3)), name="w")
        grad_check(lambda: weighted_sum(T.conv2d(x, w, stride, 1)), [x, w], rng)

    def test_channel_mismatch(self):
        with pytest.raises(ContractError):
            T.conv2d(T.DiffTensor(np.zeros((1, 4, 4, 2))), T.DiffTensor(np.zeros((3, 3, 3, 1))))

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractError):
            T.conv2d(T.DiffTensor(np.zeros((1, 4, 4, 1))), T.DiffTensor(np.zeros((2, 2, 1, 1))))


class TestBatchNorm:
    def test_constant_channel_train(self):
        x = T.DiffTensor(np.full((4, 3, 3, 2), 5.0))
        st_ = T.BatchNormState(2)
        y = T.batchnorm(x, T.DiffTensor(np.ones(2)), T.DiffTensor(np.zeros(2)), st_, "train")
        assert np.all(np.isfinite(y.values))
        np.testing.assert_allclose(y.values, 0.0, atol=1e-12)

    def test_eval_identity(self):
        rng = np.random.default_rng(4)
        x = T.DiffTensor(rng.normal(size=(2, 3, 3, 2)))
        st_ = T.BatchNormState(2)
        y = T.batchnorm(x, T.DiffTensor(np.ones(2)), T.DiffTensor(np.zeros(2)), st_, "eval")
        np.testing.assert_allclose(y.values, x.values / math.sqrt(1 + T.BN_EPS), rtol=1e-12)
        np.testing.assert_allclose(y.values, x.values, atol=1e-5 * np.abs(x.values).max())

    def test_batch_statistics(self):
        rng = np.random.default_rng(5)
        x = T.DiffTensor(rng.normal(3.0, 2.0, size=(4, 5, 5, 3)))
        y = T.batchnorm(x, T.DiffTensor(np.ones(3)), T.DiffTensor(np.zeros(3)), T.BatchNormState(3), "train")
        m = y.values.mean(axis=(0, 1, 2))
        v = y.values.var(axis=(0, 1, 2))
        assert np.all(np.abs(m) < 1e-5)
        assert np.all(np.abs(v - 1) < 1e-3)

    def test_running_moments_update(self):
        rng = np.random.default_rng(6)
        vals = rng.normal(2.0, 1.0, size=(4, 3, 3, 1))
        st_ = T.BatchNormState(1, momentum=0.1)
        T.batchnorm(T.DiffTensor(vals), T.DiffTensor(np.ones(1)), T.DiffTensor(np.zeros(1)), st_, "train")
        np.testing.assert_allclose(st_.running_mean, 0.1 * vals.mean(), rtol=1e-12)
        np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * vals.var(ddof=1), rtol=1e-12)

    @pytest.mark.parametrize("mode", ["train", "eval"])
    def test_gradients(self, mode):
        rng = np.random.default_rng(7)
        x = T.parameter(rng.normal(size=(3, 4, 4, 2)), name="x")
        g = T.parameter(rng.uniform(0.5, 1.5, size=2), name="gamma")
        b = T.parameter(rng.normal(size=2), name="beta")
        st_ = T.BatchNormState(2)
        st_.running_mean = np.array([0.3, -0.2])
        st_.running_var = np.array([1.5, 0.7])

        def build():
            s = T.BatchNormState(2)
            s.running_mean, s.running_var = st_.running_mean.copy(), st_.running_var.copy()
            return weighted_sum(T.batchnorm(x, g, b, s, mode))

        grad_check(build, [x, g, b], rng)

    def test_channel_mismatch(self):
        with pytest.raises(ContractError):
            T.batchnorm(T.DiffTensor(np.zeros((1, 2, 2, 3))), T.DiffTensor(np.ones(2)),
                        T.DiffTensor(np.zeros(2)), T.BatchNormState(2))


class TestLossAndActivations:
    def test_large_margin(self):
        logits = np.zeros((2, 2, 3))
        labels = np.array([[0, 1], [2, 0]])
        for idx in np.ndindex(labels.shape):
            logits[idx + (labels[idx],)] = 30.0
        assert T.cross_entropy(T.DiffTensor(logits), labels).values < 1e-9 * 1e1

    def test_uniform_logits(self):
        loss = T.cross_entropy(T.DiffTensor(np.zeros((3, 3, 4))), np.zeros((3, 3), int))
        assert float(loss.values) == pytest.approx(math.log(4), abs=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(8)
        logits = rng.normal(size=(3, 3, 4)) * 3
        labels = rng.integers(0, 4, size=(3, 3))
        labels[0, 0] = T.IGNORE
        got = float(T.cross_entropy(T.DiffTensor(logits), labels).values)
        assert got == pytest.approx(cross_entropy_scalar(logits, labels), abs=1e-6)

    def test_all_ignored(self):
        x = T.parameter(np.ones((2, 2, 3)))
        loss = T.cross_entropy(x, np.full((2, 2), T.IGNORE))
        assert loss.meta["empty"] and float(loss.values) == 0.0
        loss.backward()
        assert not x.grad.any()

    def test_per_sample_mean(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(3, 2, 2, 3))
        labels = rng.integers(0, 3, size=(3, 2, 2))
        labels[1, :, 1] = T.IGNORE
        labels[2] = T.IGNORE
        got = float(T.cross_entropy(T.DiffTensor(logits), labels, per_sample=True).values)
        want = (cross_entropy_scalar(logits[0], labels[0]) + cross_entropy_scalar(logits[1], labels[1])) / 3
        assert got == pytest.approx(want, abs=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ContractError):
            T.cross_entropy(T.DiffTensor(np.zeros((2, 2))), np.array([0, 5]))

    @pytest.mark.parametrize("per_sample", [False, True])
    def test_ce_gradients(self, per_sample):
        rng = np.random.default_rng(10)
        x = T.parameter(rng.normal(size=(2, 3, 3, 4)), name="logits")
        labels = rng.integers(0, 4, size=(2, 3, 3))
        labels[0, 1, 1] = T.IGNORE
        grad_check(lambda: T.cross_entropy(x, labels, per_sample=per_sample), [x], rng, n_probe=10)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.floats(0.1, 50.0), st.integers(0, 2**31 - 1))
    def test_softmax_is_distribution(self, k, spread, seed):
        x = np.random.default_rng(seed).normal(size=(3, 4, k)) * spread
        p = T.softmax_channel(T.DiffTensor(x)).values
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    @pytest.mark.parametrize("op", ["relu", "softmax", "log_clamped", "resize", "concat", "gather", "blend", "mul"])
    def test_elementwise_gradients(self, op):
        rng = np.random.default_rng(11)
        a = T.parameter(rng.uniform(0.1, 1.0, size=(2, 3, 4, 3)), name="a")
        b = T.parameter(rng.normal(size=(2, 3, 4, 2)), name="b")
        patches = rng.normal(size=(4, 3, 2, 2, 1))
        fixed = rng.normal(size=(1, 3, 1, 2))
        builds = {
            "relu": lambda: weighted_sum(T.relu(T.add(a, -0.5))),
            "softmax": lambda: weighted_sum(T.softmax_channel(a)),
            "log_clamped": lambda: weighted_sum(T.log_clamped(a)),
            "resize": lambda: weighted_sum(T.resize_bilinear(b, 5, 7)),
            "concat": lambda: weighted_sum(T.concat([a, b], axis=-1)),
            "gather": lambda: weighted_sum(T.gather_locations(a, [0, 1, 1, 0], [0, 2, 2, 1], [3, 0, 0, 1])),
            "blend": lambda: weighted_sum(T.blend(T.gather_locations(a, [0, 1, 1, 0], [0, 2, 2, 1], [3, 0, 0, 1]), patches)),
            "mul": lambda: weighted_sum(T.mul(b, T.DiffTensor(fixed))),
        }
        tensors = [b] if op in ("resize", "mul") else ([a, b] if op == "concat" else [a])
        grad_check(builds[op], tensors, rng)

    def test_log_clamped_floor(self):
        x = T.parameter(np.array([0.0, 1e-20, 0.5]))
        y = T.log_clamped(x)
        np.testing.assert_array_equal(y.values[:2], [-30.0, -30.0])
        T.total(y).backward()
        assert x.grad[0] == 0.0 and x.grad[1] == 0.0 and x.grad[2] == pytest.approx(2.0)


def small_stack(seed=12):
    rng = np.random.default_rng(seed)
    w1 = T.parameter(rng.normal(size=(3, 3, 2, 4)) * 0.5, name="w1")
    g1 = T.parameter(rng.uniform(0.5, 1.5, size=4), name="g1")
    b1 = T.parameter(rng.normal(size=4) * 0.1, name="b1")
    w2 = T.parameter(rng.normal(size=(3, 3, 4, 3)) * 0.5, name="w2")
    x = rng.normal(size=(2, 5, 5, 2))
    labels = rng.integers(0, 3, size=(2, 5, 5))

    def build():
        h = T.conv2d(T.DiffTensor(x), w1, padding=1)
        h = T.relu(T.batchnorm(h, g1, b1, T.BatchNormState(4), "train"))
        return T.cross_entropy(T.conv2d(h, w2, padding=1), labels)

    return build, [w1, g1, b1, w2]


class TestEngine:
    def test_composition_gradients(self):
        build, params = small_stack()
        grad_check(build, params, np.random.default_rng(0), n_probe=8)

    def test_grad_shapes_and_zero_grad(self):
        build, params = small_stack()
        build().backward()
        for p in params:
            assert p.grad.shape == p.values.shape
            p.zero_grad()
            assert not p.grad.any()

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            build, params = small_stack(seed=99)
            loss = build()
            loss.backward()
            runs.append([loss.values.tobytes()] + [p.grad.tobytes() for p in params])
        assert runs[0] == runs[1]

    def test_straight_through_identity_backward(self):
        f = T.parameter(np.array([[0.2, 0.5, 0.3], [0.5, 0.5, 0.0]]))
        y = T.straight_through_onehot(f)
        np.testing.assert_array_equal(y.values, [[0, 1, 0], [1, 0, 0]])
        g = np.array([[1.0, -2.0, 3.0], [0.5, 0.25, -1.0]])
        y.backward(g)
        np.testing.assert_array_equal(f.grad, g)


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = T.parameter(np.array([1.0, -2.0, 3.0]))
        state = OptimState.for_params([p])
        adam_step([p], state, 1e-3)
        np.testing.assert_array_equal(p.values, [1.0, -2.0, 3.0])
        assert state.t == 1

    def test_first_step_closed_form(self):
        g = np.array([0.3, -2.0, 1e-3])
        p = T.parameter(np.zeros(3))
        p.grad[...] = g
        state = OptimState.for_params([p])
        adam_step([p], state, 0.01)
        np.testing.assert_allclose(p.values, -0.01 * g / (np.abs(g) + 1e-8), atol=1e-9)

    def test_unit_step_property(self):
        p = T.parameter(np.zeros(1))
        state = OptimState.for_params([p])
        lr, g = 1e-3, 0.37
        prev = 0.0
        for _ in range(500):
            p.grad[...] = g
            adam_step([p], state, lr)
            step = prev - p.values[0]
            prev = p.values[0]
        assert abs(step - lr) / lr < 0.01
        assert p.values[0] == pytest.approx(adam_scalar([g] * 500, lr)[-1], rel=1e-12)

    def test_matches_scalar_oracle_varying_gradient(self):
        rng = np.random.default_rng(13)
        grads = rng.normal(size=50)
        p = T.parameter(np.zeros(1))
        state = OptimState.for_params([p])
        for g in grads:
            p.grad[...] = g
            adam_step([p], state, 0.05)
        assert p.values[0] == pytest.approx(adam_scalar(grads, 0.05)[-1], rel=1e-12)

    def test_weight_decay_is_l2_gradient(self):
        a, b = T.parameter(np.array([2.0])), T.parameter(np.array([2.0]))
        sa = OptimState.for_params([a], weight_decay=0.1)
        sb = OptimState.for_params([b])
        a.grad[...] = 0.5
        b.grad[...] = 0.5 + 0.1 * 2.0
        adam_step([a], sa, 0.01)
        adam_step([b], sb, 0.01)
        assert a.values[0] == b.values[0]

    def test_non_finite_gradient_aborts(self):
        p, q = T.parameter(np.ones(2)), T.parameter(np.ones(2), name="q")
        q.grad[1] = np.nan
        state = OptimState.for_params([p, q])
        with pytest.raises(NonFiniteGradient) as err:
            adam_step([p, q], state, 0.1)
        assert err.value.index == 1
        assert state.t == 0
        np.testing.assert_array_equal(p.values, 1.0)

    def test_monotone_step_counter(self):
        p = T.parameter(np.ones(1))
        state = OptimState.for_params([p])
        for i in range(1, 6):
            p.grad[...] = 1.0
            adam_step([p], state, 0.1)
            assert state.t == i
            assert state.m[0].shape == p.values.shape


class TestPolyLR:
    def test_values(self):
        assert poly_lr(0, 100, 2e-5, 0.9) == 2e-5
        assert poly_lr(100, 100, 2e-5, 0.9) == 0.0
        assert poly_lr(50, 100, 2e-5, 0.9) == pytest.approx(2e-5 * 0.5 ** 0.9, rel=1e-15)

    def test_zero_total(self):
        with pytest.raises(ContractError):
            poly_lr(0, 0, 1e-3)

    def test_monotone(self):
        vals = [poly_lr(t, 37, 1.0) for t in range(38)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        arrays = {"fov.conv0.w": rng.normal(size=(3, 3, 1, 4)), "seg.head.b": rng.normal(size=5),
                  "scalar": np.array(2.5)}
        save_checkpoint(tmp_path / "a.ckpt", arrays)
        back = load_checkpoint(tmp_path / "a.ckpt")
        assert list(back) == list(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])

    def test_byte_layout(self, tmp_path):
        save_checkpoint(tmp_path / "b.ckpt", {"ab": np.array([[1.0, 2.0]])})
        raw = (tmp_path / "b.ckpt").read_bytes()
        assert raw[:8] == b"FOVCKPT\0"
        assert raw[8:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert raw[16:20] == b"\x02\x00ab"
        assert raw[20:29] == b"\x02" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        assert np.frombuffer(raw[29:], "<f8").tolist() == [1.0, 2.0]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"garbage!" + bytes(16))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x.ckpt")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.ckpt")
