"""Kernel-level tests: forward values against closed forms and brute-force
oracles, backward passes against central finite differences."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasrecllm.gradcheck import gradcheck
from sasrecllm.rng import RngStream
from sasrecllm.tensor import (
    Parameter,
    Tensor,
    bce_loss,
    concat,
    dropout,
    embedding,
    layer_norm,
    matmul,
    mul,
    relu,
    sigmoid,
    softmax_rows,
    take,
    tanh,
    tmean,
    transpose,
    tsum,
)


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple loop in float64."""
    m, k = a.shape
    k2, p = b.shape
    out = np.zeros((m, p), dtype=np.float64)
    for i in range(m):
        for j in range(p):
            for t in range(k):
                out[i, j] += float(a[i, t]) * float(b[t, j])
    return out


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2, dtype=np.float32))
        b = Tensor(np.array([[3.0, 4.0], [5.0, 6.0]], dtype=np.float32))
        assert np.array_equal(matmul(a, b).data, b.data)

    def test_scalar_case(self):
        out = matmul(Tensor([[2.0]]), Tensor([[7.0]]))
        assert out.data[0, 0] == 14.0

    def test_against_triple_loop(self):
        rng = RngStream(1)
        a = rng.normal((5, 4))
        b = rng.normal((4, 3))
        got = matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
        assert np.max(np.abs(got - matmul_oracle(a, b))) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_backward(self):
        rng = RngStream(2)
        a = Parameter(rng.normal((3, 4)))
        b = Parameter(rng.normal((4, 2)))
        assert gradcheck(lambda: tsum(matmul(a, b)), [a, b]) < 1e-6

    def test_batched_backward(self):
        rng = RngStream(3)
        a = Parameter(rng.normal((2, 3, 4)))
        b = Parameter(rng.normal((2, 4, 3)))
        assert gradcheck(lambda: tsum(matmul(a, b)), [a, b]) < 1e-6


class TestSoftmax:
    def test_symmetry(self):
        out = softmax_rows(Tensor([[0.0, 0.0]]))
        assert np.allclose(out.data, [[0.5, 0.5]])

    def test_closed_form(self):
        out = softmax_rows(Tensor([[0.0, math.log(3.0)]], dtype=np.float64))
        assert np.allclose(out.data, [[0.25, 0.75]], atol=1e-12)

    def test_large_inputs_no_overflow(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.all(np.isfinite(out.data))
        assert out.data[0, 0] > 0.999999
        assert out.data[0, 1] < 1e-6

    @given(st.lists(st.floats(-1e4, 1e4), min_size=2, max_size=8))
    @settings(deadline=None, max_examples=60)
    def test_rows_sum_to_one(self, row):
        out = softmax_rows(Tensor(np.array([row], dtype=np.float64)))
        assert abs(out.data.sum() - 1.0) < 1e-9

    @given(
        st.lists(st.floats(-100, 100), min_size=2, max_size=8),
        st.floats(-100, 100),
    )
    @settings(deadline=None, max_examples=60)
    def test_shift_invariance(self, row, c):
        x = np.array([row], dtype=np.float64)
        a = softmax_rows(Tensor(x)).data
        b = softmax_rows(Tensor(x + c)).data
        assert np.max(np.abs(a - b)) < 1e-9

    def test_backward(self):
        rng = RngStream(4)
        x = Parameter(rng.normal((3, 5)))
        w = Tensor(rng.uniform((3, 5)), dtype=np.float64)
        assert gradcheck(lambda: tsum(mul(softmax_rows(x), w)), [x]) < 1e-6


class TestLayerNorm:
    def test_constant_vector_maps_to_zero(self):
        gain = Parameter(np.ones(3, dtype=np.float32))
        bias = Parameter(np.zeros(3, dtype=np.float32))
        out = layer_norm(Tensor([1.0, 1.0, 1.0]), gain, bias)
        assert np.allclose(out.data, 0.0, atol=1e-6)

    def test_two_point_closed_form(self):
        # mean 0, var 1: output is x / sqrt(1 + eps)
        gain = Parameter(np.ones(2, dtype=np.float64))
        bias = Parameter(np.zeros(2, dtype=np.float64))
        out = layer_norm(Tensor(np.array([1.0, -1.0]), dtype=np.float64), gain, bias, eps=1e-5)
        expected = 1.0 / math.sqrt(1.0 + 1e-5)
        assert np.allclose(out.data, [expected, -expected], atol=1e-12)

    def test_zero_gain_gives_bias(self):
        gain = Parameter(np.zeros(4, dtype=np.float32))
        bias = Parameter(np.full(4, 2.5, dtype=np.float32))
        out = layer_norm(Tensor(np.arange(4.0)), gain, bias)
        assert np.allclose(out.data, 2.5)

    def test_rejects_nonpositive_eps(self):
        gain = Parameter(np.ones(2))
        bias = Parameter(np.zeros(2))
        with pytest.raises(ValueError):
            layer_norm(Tensor([1.0, 2.0]), gain, bias, eps=0.0)

    def test_backward(self):
        rng = RngStream(5)
        x = Parameter(rng.normal((4, 6)))
        gain = Parameter(rng.normal((6,), mean=1.0, std=0.1))
        bias = Parameter(rng.normal((6,), std=0.1))
        assert gradcheck(lambda: tsum(mul(layer_norm(x, gain, bias), x)), [x, gain, bias]) < 1e-5


class TestDropout:
    def test_eval_is_identity(self):
        x = Tensor(RngStream(6).normal((10, 10)))
        out = dropout(x, 0.5, "eval", None)
        assert out is x

    def test_rate_zero_is_identity(self):
        x = Tensor(RngStream(7).normal((5, 5)))
        assert dropout(x, 0.0, "train", RngStream(0)) is x

    def test_inverted_scaling_preserves_mean(self):
        x = Tensor(np.ones(100_000, dtype=np.float64))
        out = dropout(x, 0.5, "train", RngStream(8))
        assert 0.98 <= out.data.mean() <= 1.02

    def test_rejects_bad_rate(self):
        x = Tensor([1.0])
        for rate in (-0.1, 1.0, 1.5):
            with pytest.raises(ValueError):
                dropout(x, rate, "train", RngStream(0))

    def test_backward_matches_mask(self):
        x = Parameter(np.ones((50,), dtype=np.float64))
        out = dropout(x, 0.3, "train", RngStream(9))
        tsum(out).backward()
        assert np.array_equal(x.grad, out.data)  # ones through the kept/scaled mask


class TestBce:
    def test_confident_correct_is_near_zero(self):
        loss = bce_loss(Tensor(np.array(1.0)), 1.0)
        assert 0.0 < float(loss.data) < 2e-7

    def test_half_is_ln2(self):
        loss = bce_loss(Tensor(np.array(0.5, dtype=np.float64)), 1.0)
        assert abs(float(loss.data) - math.log(2.0)) < 1e-12

    def test_quarter_closed_form(self):
        loss = bce_loss(Tensor(np.array(0.25, dtype=np.float64)), 0.0)
        assert abs(float(loss.data) - (-math.log(0.75))) < 1e-12

    def test_rejects_bad_label(self):
        with pytest.raises(ValueError):
            bce_loss(Tensor(np.array(0.5)), 0.3)

    def test_gradient_analytic(self):
        p = Parameter(np.array(0.3, dtype=np.float64))
        loss = bce_loss(p, 1.0)
        loss.backward()
        assert abs(float(p.grad) - (0.3 - 1.0) / (0.3 * 0.7)) < 1e-12

    def test_backward_fd(self):
        p = Parameter(np.array(0.37, dtype=np.float64))
        assert gradcheck(lambda: bce_loss(p, 0.0), [p]) < 1e-6


class TestShapeOps:
    def test_concat_backward(self):
        rng = RngStream(10)
        a = Parameter(rng.normal((2, 3)))
        b = Parameter(rng.normal((4, 3)))
        assert gradcheck(lambda: tsum(mul(concat([a, b], axis=0), concat([a, b], axis=0))), [a, b]) < 1e-5

    def test_take_scatter_adds_duplicates(self):
        table = Parameter(np.ones((4, 2), dtype=np.float64))
        out = embedding(table, np.array([1, 1, 3]))
        tsum(out).backward()
        assert np.array_equal(table.grad[:, 0], [0.0, 2.0, 0.0, 1.0])

    def test_embedding_range_check(self):
        table = Parameter(np.ones((4, 2)))
        with pytest.raises(IndexError):
            embedding(table, np.array([4]))

    def test_transpose_roundtrip(self):
        x = Tensor(RngStream(11).normal((2, 3, 4)))
        back = transpose(transpose(x, (2, 0, 1)), (1, 2, 0))
        assert np.array_equal(back.data, x.data)

    def test_slice_backward(self):
        x = Parameter(RngStream(12).normal((5, 3)))
        assert gradcheck(lambda: tsum(mul(take(x, slice(1, 4)), take(x, slice(1, 4)))), [x]) < 1e-5


class TestElementwise:
    def test_activations_backward(self):
        rng = RngStream(13)
        for fn in (relu, sigmoid, tanh):
            x = Parameter(rng.normal((4, 4)) + 0.1)  # keep relu off the kink
            assert gradcheck(lambda fn=fn, x=x: tsum(mul(fn(x), fn(x))), [x]) < 1e-5

    def test_mean(self):
        x = Tensor(np.arange(6.0).reshape(2, 3))
        assert float(tmean(x).data) == pytest.approx(2.5)
        assert np.allclose(tmean(x, axis=1).data, [1.0, 4.0])


class TestDeterminism:
    def test_two_runs_bit_identical(self):
        def run():
            rng = RngStream(99)
            x = Tensor(rng.normal((6, 6)))
            w = Parameter(rng.normal((6, 6)))
            out = dropout(relu(matmul(x, w)), 0.4, "train", rng.spawn("drop"))
            return tsum(out).data.copy()

        assert np.array_equal(run(), run())


class TestAccumulation:
    def test_grad_accumulates_across_backwards(self):
        p = Parameter(np.array([2.0], dtype=np.float64))
        for _ in range(3):
            tsum(mul(p, p)).backward()
        assert np.allclose(p.grad, 3 * 2 * 2.0)

    def test_shared_node_fan_out(self):
        p = Parameter(np.array([3.0], dtype=np.float64))
        shared = mul(p, p)  # p^2
        total = tsum(shared + shared)  # 2 p^2
        total.backward()
        assert np.allclose(p.grad, 4 * 3.0)
