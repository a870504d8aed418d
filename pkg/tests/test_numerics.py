"""Tensor ops: forward goldens and finite-difference gradient verification."""

import math

import numpy as np
import pytest

from tseg import numerics
from tseg.numerics import (Adam, CKPT_MAGIC, GruParams, NumericsError, Parameter,
                           gradient_check, gru_cell, gru_sequence, gru_sequence_backward,
                           layer_norm, layer_norm_backward, load_checkpoint, matmul,
                           matmul_backward, max_pool, max_pool_backward, mean_pool,
                           mean_pool_backward, relu, relu_backward, save_checkpoint,
                           sigmoid, sigmoid_backward, softmax, softmax_backward, tanh,
                           tanh_backward, zero_grads)


def check_op(params, f, analytic, tolerance=1e-4, epsilon=1e-3, seed=0):
    """Populate grads via ``analytic`` then compare against finite differences."""
    zero_grads(params)
    analytic()
    report = gradient_check(f, params, epsilon=epsilon, tolerance=tolerance, seed=seed)
    assert report.passed, (report.worst_param, report.max_rel_err)
    return report


class TestMatmul:
    def test_identity(self):
        v = np.arange(12.0).reshape(3, 4)
        np.testing.assert_array_equal(matmul(np.eye(3), v), v)

    def test_shape(self):
        out = matmul(np.ones((2, 3)), np.ones((3, 2)))
        assert out.shape == (2, 2)

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(NumericsError, match=r"\(2, 3\).*\(2, 2\)"):
            matmul(np.ones((2, 3)), np.ones((2, 2)))

    def test_gradient(self):
        rng = np.random.default_rng(0)
        a = Parameter("a", rng.normal(size=(3, 4)))
        b = Parameter("b", rng.normal(size=(4, 2)))
        g = rng.normal(size=(3, 2))

        def f():
            return float(np.sum(matmul(a.value, b.value) * g))

        def analytic():
            da, db = matmul_backward(g, a.value, b.value)
            a.grad += da
            b.grad += db

        report = check_op([a, b], f, analytic, tolerance=1e-6)
        assert report.max_rel_err <= 1e-6


class TestSoftmax:
    def test_uniform_on_equal_inputs(self):
        np.testing.assert_allclose(softmax(np.zeros(3)), np.full(3, 1 / 3))

    def test_mask_concentrates(self):
        out = softmax(np.array([0.3, 99.0]), mask=np.array([True, False]))
        np.testing.assert_allclose(out, [1.0, 0.0])

    def test_sums_to_one(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 5))
        mask = rng.random((4, 5)) < 0.7
        mask[:, 0] = True
        out = softmax(x, axis=-1, mask=mask)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)

    def test_all_masked_rejected(self):
        with pytest.raises(NumericsError, match="masked"):
            softmax(np.ones(3), mask=np.zeros(3, dtype=bool))

    def test_gradient(self):
        rng = np.random.default_rng(2)
        x = Parameter("x", rng.normal(size=(3, 5)))
        g = rng.normal(size=(3, 5))
        mask = np.array([[True] * 5, [True, True, True, False, False], [True] * 5])

        def f():
            return float(np.sum(softmax(x.value, axis=-1, mask=mask) * g))

        def analytic():
            probs = softmax(x.value, axis=-1, mask=mask)
            x.grad += softmax_backward(g, probs, axis=-1)

        report = check_op([x], f, analytic, tolerance=1e-6)
        assert report.max_rel_err <= 1e-6


class TestElementwise:
    def test_goldens(self):
        assert float(sigmoid(np.array(0.0))) == 0.5
        assert float(relu(np.array(-1.0))) == 0.0
        assert float(tanh(np.array(0.0))) == 0.0

    @pytest.mark.parametrize("fn,backward,uses_out", [
        (tanh, tanh_backward, True),
        (sigmoid, sigmoid_backward, True),
        (relu, relu_backward, False),
    ])
    def test_gradients(self, fn, backward, uses_out):
        rng = np.random.default_rng(3)
        x = Parameter("x", rng.normal(size=(4, 4)) + 0.05)
        g = rng.normal(size=(4, 4))

        def f():
            return float(np.sum(fn(x.value) * g))

        def analytic():
            ref = fn(x.value) if uses_out else x.value
            x.grad += backward(g, ref)

        report = check_op([x], f, analytic, tolerance=1e-6, epsilon=1e-5)
        assert report.max_rel_err <= 1e-6


class TestLayerNorm:
    def test_constant_row_outputs_bias(self):
        x = np.full((2, 6), 3.7)
        gain = np.ones(6)
        bias = np.arange(6.0)
        out, _ = layer_norm(x, gain, bias)
        np.testing.assert_allclose(out, np.broadcast_to(bias, (2, 6)), atol=1e-7)

    def test_output_mean_matches_bias_mean(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(3, 8))
        bias = rng.normal(size=8)
        out, _ = layer_norm(x, np.ones(8), bias)
        np.testing.assert_allclose(out.mean(axis=-1), bias.mean(), atol=1e-10)

    def test_gradient(self):
        rng = np.random.default_rng(5)
        x = Parameter("x", rng.normal(size=(3, 6)))
        gain = Parameter("gain", rng.normal(size=6))
        bias = Parameter("bias", rng.normal(size=6))
        g = rng.normal(size=(3, 6))

        def f():
            out, _ = layer_norm(x.value, gain.value, bias.value)
            return float(np.sum(out * g))

        def analytic():
            _, cache = layer_norm(x.value, gain.value, bias.value)
            dx, dgain, dbias = layer_norm_backward(g, cache)
            x.grad += dx
            gain.grad += dgain
            bias.grad += dbias

        report = check_op([x, gain, bias], f, analytic, tolerance=1e-5)
        assert report.max_rel_err <= 1e-5


class TestPooling:
    def test_mean_golden(self):
        assert float(mean_pool(np.array([1.0, 3.0]), 0)) == 2.0

    def test_max_golden(self):
        values, idx = max_pool(np.array([1.0, 3.0]), 0)
        assert float(values) == 3.0 and int(idx) == 1

    def test_full_mask_equals_unmasked(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(4, 3))
        mask = np.ones(4, dtype=bool)
        np.testing.assert_array_equal(mean_pool(x, 0, mask), mean_pool(x, 0))
        np.testing.assert_array_equal(max_pool(x, 0, mask)[0], max_pool(x, 0)[0])

    def test_all_masked_rejected(self):
        with pytest.raises(NumericsError):
            mean_pool(np.ones((2, 2)), 0, np.zeros(2, dtype=bool))
        with pytest.raises(NumericsError):
            max_pool(np.ones((2, 2)), 0, np.zeros(2, dtype=bool))

    def test_max_ties_route_to_first(self):
        x = np.array([[2.0], [2.0], [1.0]])
        values, idx = max_pool(x, 0)
        dx = max_pool_backward(np.array([1.0]), x.shape, 0, idx)
        np.testing.assert_array_equal(dx, [[1.0], [0.0], [0.0]])

    def test_gradients(self):
        rng = np.random.default_rng(7)
        x = Parameter("x", rng.normal(size=(5, 3)))
        g = rng.normal(size=3)
        mask = np.array([True, True, False, True, False])

        def f_mean():
            return float(np.sum(mean_pool(x.value, 0, mask) * g))

        def analytic_mean():
            x.grad += mean_pool_backward(g, x.value.shape, 0, mask)

        check_op([x], f_mean, analytic_mean, tolerance=1e-6)

        def f_max():
            values, _ = max_pool(x.value, 0, mask)
            return float(np.sum(values * g))

        def analytic_max():
            _, idx = max_pool(x.value, 0, mask)
            x.grad += max_pool_backward(g, x.value.shape, 0, idx)

        check_op([x], f_max, analytic_max, tolerance=1e-6)


class TestGru:
    def test_zero_params_hand_trace(self):
        """With zero weights both gates are 0.5; a candidate bias of c gives
        a first hidden state of tanh(c)/2 from the zero initial state."""
        rng = np.random.default_rng(8)
        gp = GruParams(3, 2, rng)
        for p in gp.parameters():
            p.value[...] = 0.0
        h, _ = gru_sequence(np.array([[1.0, -2.0, 0.5]]), gp)
        np.testing.assert_array_equal(h, np.zeros(2))
        gp.b_h.value[...] = 0.6
        h, _ = gru_sequence(np.array([[1.0, -2.0, 0.5]]), gp)
        np.testing.assert_allclose(h, math.tanh(0.6) / 2, atol=1e-15)

    def test_single_step_equals_cell(self):
        rng = np.random.default_rng(9)
        gp = GruParams(3, 4, rng)
        x = rng.normal(size=(1, 3))
        h_seq, _ = gru_sequence(x, gp)
        h_cell, _ = gru_cell(x[0], np.zeros(4), gp)
        np.testing.assert_array_equal(h_seq, h_cell)

    def test_masked_steps_copy_state(self):
        rng = np.random.default_rng(10)
        gp = GruParams(2, 3, rng)
        x = rng.normal(size=(3, 2))
        h_all, _ = gru_sequence(x[[0, 2]], gp)
        h_masked, _ = gru_sequence(x, gp, step_mask=np.array([True, False, True]))
        np.testing.assert_array_equal(h_all, h_masked)

    def test_gradient_three_steps(self):
        rng = np.random.default_rng(11)
        gp = GruParams(3, 4, rng)
        x = Parameter("inputs", rng.normal(size=(3, 3)))
        g = rng.normal(size=4)
        params = [x, *gp.parameters()]

        def f():
            h, _ = gru_sequence(x.value, gp)
            return float(np.sum(h * g))

        def analytic():
            _, caches = gru_sequence(x.value, gp)
            x.grad += gru_sequence_backward(g, caches, gp, x.value.shape)

        report = check_op(params, f, analytic, tolerance=1e-5)
        assert report.max_rel_err <= 1e-5


class TestAdam:
    def test_zero_gradient_leaves_params(self):
        p = Parameter("p", np.array([3.0, -4.0]))
        before = p.value.copy()
        Adam([p], lr=0.5).step()
        np.testing.assert_array_equal(p.value, before)

    def test_single_step_decreases_quadratic(self):
        p = Parameter("p", np.array([1.0]))
        opt = Adam([p], lr=1e-3)
        p.grad[...] = 2.0 * p.value
        opt.step()
        assert float(p.value[0] ** 2) < 1.0

    def test_quadratic_converges(self):
        p = Parameter("p", np.array([1.0]))
        opt = Adam([p], lr=0.1)
        for _ in range(200):
            p.grad[...] = 2.0 * p.value
            opt.step()
        assert abs(float(p.value[0])) < 1e-2

    def test_gradients_zeroed_after_step(self):
        p = Parameter("p", np.array([1.0]))
        opt = Adam([p], lr=0.1)
        p.grad[...] = 5.0
        opt.step()
        np.testing.assert_array_equal(p.grad, np.zeros(1))


class TestGradientCheck:
    def test_quadratic_tight(self):
        rng = np.random.default_rng(12)
        coeff = rng.uniform(0.5, 2.0, size=6)
        theta = Parameter("theta", rng.normal(size=6))

        def f():
            return float(np.sum(coeff * theta.value ** 2))

        theta.grad[...] = 2.0 * coeff * theta.value
        report = gradient_check(f, [theta], epsilon=1e-4, tolerance=1e-8)
        assert report.passed and report.max_rel_err <= 1e-8

    def test_constant_function_zero_both_sides(self):
        theta = Parameter("theta", np.ones(3))

        def f():
            return 7.0

        report = gradient_check(f, [theta], tolerance=1e-10)
        assert report.passed and report.max_rel_err == 0.0

    def test_wrong_backward_detected(self):
        theta = Parameter("theta", np.array([0.3, -0.7]))

        def f():
            return float(np.sum(theta.value ** 2))

        theta.grad[...] = 2.0 * theta.value + 0.5  # deliberately wrong
        report = gradient_check(f, [theta], tolerance=1e-4)
        assert not report.passed

    def test_nondeterministic_f_rejected(self):
        theta = Parameter("theta", np.ones(1))
        state = {"calls": 0}

        def f():
            state["calls"] += 1
            return float(state["calls"])

        with pytest.raises(NumericsError, match="deterministic"):
            gradient_check(f, [theta])


class TestCheckpoint:
    def params(self):
        rng = np.random.default_rng(13)
        return [Parameter("weights", rng.normal(size=(3, 4))),
                Parameter("bias", rng.normal(size=4)),
                Parameter("scalar", rng.normal(size=1))]

    def test_round_trip_bit_identical(self, tmp_path):
        params = self.params()
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params)
        first = path.read_bytes()
        assert first.startswith(CKPT_MAGIC)
        loaded = load_checkpoint(path)
        for p in params:
            np.testing.assert_array_equal(loaded[p.name],
                                          p.value.astype(np.float32).astype(np.float64))
        reloaded = [Parameter(name, arr) for name, arr in loaded.items()]
        save_checkpoint(path, reloaded)
        assert path.read_bytes() == first

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"WRONGMAGI" + b"\x00" * 16)
        with pytest.raises(NumericsError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, self.params())
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(NumericsError, match="truncated"):
            load_checkpoint(path)

    def test_duplicate_names_rejected(self, tmp_path):
        params = [Parameter("same", np.ones(2)), Parameter("same", np.ones(2))]
        with pytest.raises(NumericsError, match="duplicate"):
            save_checkpoint(tmp_path / "dup.ckpt", params)


class TestFiniteChecking:
    def test_flag_catches_nan(self):
        numerics.check_finite = True
        try:
            with pytest.raises(NumericsError, match="non-finite"):
                matmul(np.array([[np.nan]]), np.array([[1.0]]))
        finally:
            numerics.check_finite = False
