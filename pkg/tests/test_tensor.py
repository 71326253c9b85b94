"""Tensor op contracts: value oracles, differentiation, determinism."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import assert_grads_match, matmul_triple_loop
from spon import tensor as T
from spon.tensor import DimensionError, NumericError, Tape, Tensor


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal(T.matmul(a, eye).data, a.data)

    def test_hand_1x1(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.shape == (1, 1)
        assert out.item() == 11.0

    def test_against_triple_loop_oracle(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 7)).astype(np.float32)
        b = rng.standard_normal((7, 3)).astype(np.float32)
        expected = matmul_triple_loop(a, b)
        np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, expected, atol=1e-6)

    @given(
        m=st.integers(1, 16), k=st.integers(1, 16), n=st.integers(1, 16),
        seed=st.integers(0, 2**31),
    )
    @settings(max_examples=30, deadline=None)
    def test_triple_loop_property(self, m, k, n, seed):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((m, k)).astype(np.float32)
        b = rng.standard_normal((k, n)).astype(np.float32)
        np.testing.assert_allclose(
            T.matmul(Tensor(a), Tensor(b)).data, matmul_triple_loop(a, b), atol=1e-6
        )

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_batched(self):
        rng = np.random.default_rng(3)
        a = rng.standard_normal((4, 5, 6)).astype(np.float32)
        b = rng.standard_normal((4, 6, 2)).astype(np.float32)
        out = T.matmul(Tensor(a), Tensor(b)).data
        for i in range(4):
            np.testing.assert_allclose(out[i], matmul_triple_loop(a[i], b[i]), atol=1e-6)


class TestSoftmax:
    def test_symmetry(self):
        out = T.softmax(Tensor([0.0, 0.0, 0.0])).data
        np.testing.assert_allclose(out, [1 / 3] * 3, atol=1e-7)

    def test_overflow_guard(self):
        out = T.softmax(Tensor([1000.0, 1000.0])).data
        np.testing.assert_allclose(out, [0.5, 0.5], atol=1e-7)

    def test_against_float64_oracle(self):
        x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
        e = np.exp(x.astype(np.float64))
        np.testing.assert_allclose(T.softmax(Tensor(x)).data, e / e.sum(), atol=1e-6)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-30, 30))
    @settings(max_examples=60, deadline=None)
    def test_rows_sum_to_one_and_shift_invariance(self, row, shift):
        x = np.asarray(row, dtype=np.float32)
        y = T.softmax(Tensor(x)).data
        assert abs(float(y.sum()) - 1.0) <= 1e-6
        assert np.all(y > 0) and np.all(y <= 1)
        y_shifted = T.softmax(Tensor(x + np.float32(shift))).data
        np.testing.assert_allclose(y, y_shifted, atol=1e-6)


class TestElementwise:
    def test_relu_hand(self):
        np.testing.assert_array_equal(
            T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0]
        )

    def test_silu_zero(self):
        assert T.silu(Tensor([0.0])).data[0] == 0.0

    def test_silu_matches_sigmoid_product(self):
        x = np.linspace(-6, 6, 25, dtype=np.float32)
        expected = x / (1.0 + np.exp(-x.astype(np.float64)))
        np.testing.assert_allclose(T.silu(Tensor(x)).data, expected, atol=1e-6)

    def test_rms_norm_hand(self):
        # rms of [3, 4] is sqrt(12.5)
        out = T.rms_norm(Tensor([[3.0, 4.0]]), Tensor(np.ones(2)), eps=0.0).data
        np.testing.assert_allclose(out[0], [3 / np.sqrt(12.5), 4 / np.sqrt(12.5)], atol=1e-6)

    def test_rms_norm_row_scale(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((8, 16)).astype(np.float32)
        gain = np.float32(2.5)
        out = T.rms_norm(Tensor(x), Tensor(gain), eps=0.0).data
        rms = np.sqrt((out.astype(np.float64) ** 2).mean(axis=1))
        np.testing.assert_allclose(rms, 2.5, rtol=1e-5)

    def test_add_broadcast_rules(self):
        a = Tensor(np.ones((3, 4), dtype=np.float32))
        row = Tensor(np.arange(4, dtype=np.float32))
        np.testing.assert_array_equal(T.add(a, row).data[1], [1, 2, 3, 4])
        np.testing.assert_array_equal(T.add(a, 2.0).data, np.full((3, 4), 3.0))
        with pytest.raises(DimensionError):
            T.add(a, Tensor(np.ones((4, 3), dtype=np.float32)))

    def test_nan_rejected(self):
        with pytest.raises(NumericError):
            Tensor([np.nan, 1.0])


class TestBackward:
    def test_linear_case(self):
        # loss = sum(W @ x): dL/dW = outer(ones, x)
        tape = Tape()
        w = tape.parameter(np.ones((3, 4), dtype=np.float32))
        x = Tensor(np.arange(4, dtype=np.float32).reshape(4, 1))
        loss = T.total(T.matmul(w, x))
        T.backward(loss, tape)
        np.testing.assert_allclose(w.grad, np.outer(np.ones(3), np.arange(4)))

    def test_relu_subgradient_at_stated_points(self):
        tape = Tape()
        x = tape.parameter(np.array([-1.0, 2.0], dtype=np.float32))
        loss = T.total(T.relu(x))
        T.backward(loss, tape)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_relu_grad_at_exact_zero_is_zero(self):
        tape = Tape()
        x = tape.parameter(np.array([0.0], dtype=np.float32))
        T.backward(T.total(T.relu(x)), tape)
        assert x.grad[0] == 0.0

    def test_loss_must_be_scalar(self):
        tape = Tape()
        x = tape.parameter(np.ones(3, dtype=np.float32))
        y = T.mul(x, 2.0)
        with pytest.raises(DimensionError):
            T.backward(y, tape)

    def test_loss_from_other_tape_rejected(self):
        tape_a, tape_b = Tape(), Tape()
        x = tape_a.parameter(np.ones(2, dtype=np.float32))
        loss = T.total(x)
        with pytest.raises(ValueError):
            T.backward(loss, tape_b)

    def test_finite_differences_through_op_mix(self):
        """FD oracle over a graph mixing matmul/softmax/rms_norm/silu/relu/mask."""
        rng = np.random.default_rng(11)
        arrays = {
            "w1": rng.standard_normal((6, 5)),
            "w2": rng.standard_normal((5, 4)),
            "gain": rng.standard_normal(5) * 0.1 + 1.0,
            "alpha": rng.standard_normal(5) * 0.1,
        }
        x = rng.standard_normal((3, 6))
        mask = (rng.random((3, 5)) > 0.4).astype(np.float64)
        targets = np.array([1, 3, 0])

        def graph(arrs, dtype):
            tape = Tape()
            params = {k: tape.parameter(v, dtype=dtype) for k, v in arrs.items()}
            h = T.matmul(Tensor(x, dtype=dtype), params["w1"])
            h = T.rms_norm(h, params["gain"], eps=1e-5)
            h = T.mul(h, Tensor(mask, dtype=dtype))  # constant mask, zero grad through it
            h = T.add(h, params["alpha"])
            h = T.silu(h)
            h = T.add(T.relu(h), h)
            logits = T.matmul(h, params["w2"])
            sm = T.softmax(logits, axis=-1)
            loss = T.add(T.cross_entropy(logits, targets), T.total(T.mul(sm, sm)))
            return loss, tape, params

        loss, tape, params = graph(arrays, np.float64)
        T.backward(loss, tape)
        ad = {k: p.grad for k, p in params.items()}

        def loss_value(arrs):
            value, _, _ = graph(arrs, np.float64)
            return value.item()

        checked = assert_grads_match(loss_value, arrays, ad, rng, coords_per_array=6)
        assert checked >= 20

    def test_gradient_accumulates_on_reuse(self):
        tape = Tape()
        x = tape.parameter(np.array([3.0], dtype=np.float32))
        loss = T.total(T.mul(x, x))  # d(x^2)/dx = 2x
        T.backward(loss, tape)
        np.testing.assert_allclose(x.grad, [6.0])


class TestLosses:
    def test_cross_entropy_uniform(self):
        logits = Tensor(np.zeros((4, 8), dtype=np.float32))
        loss = T.cross_entropy(logits, np.array([0, 1, 2, 3]))
        assert abs(loss.item() - np.log(8)) < 1e-6

    def test_kl_zero_when_equal(self):
        rng = np.random.default_rng(0)
        logits = rng.standard_normal((5, 7)).astype(np.float32)
        logp = T.log_softmax_np(logits)
        kl = T.kl_to_teacher(logp, Tensor(logits))
        assert abs(kl.item()) < 1e-9


class TestDeterminism:
    def test_ops_bit_identical(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((6, 6)).astype(np.float32)
        b = rng.standard_normal((6, 6)).astype(np.float32)
        for op in (lambda: T.matmul(Tensor(a), Tensor(b)).data,
                   lambda: T.softmax(Tensor(a)).data,
                   lambda: T.silu(Tensor(a)).data,
                   lambda: T.rms_norm(Tensor(a), Tensor(np.ones(6, dtype=np.float32)), 1e-5).data):
            first, second = op(), op()
            assert first.tobytes() == second.tobytes()
