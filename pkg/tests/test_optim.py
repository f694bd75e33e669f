"""AdamW step arithmetic and the cosine schedule against hand-computed values."""

import math

import numpy as np
import pytest

from sasrecllm.optim import AdamW, cosine_lr
from sasrecllm.tensor import Parameter


def test_frozen_parameter_bit_identical():
    p = Parameter(np.array([1.0, -2.0], dtype=np.float32), trainable=False)
    before = p.data.tobytes()
    opt = AdamW([p], lr=0.1)
    p.grad = np.array([5.0, 5.0], dtype=np.float32)
    for _ in range(5):
        opt.step()
    assert p.data.tobytes() == before


def test_first_step_size_is_lr():
    # w=1, g=1, beta1=0.9, beta2=0.999, eps=1e-8, lambda=0:
    # m_hat = v_hat = 1, so the step is lr / (1 + eps) ~ lr
    p = Parameter(np.array([1.0], dtype=np.float64))
    opt = AdamW([p], lr=0.01)
    p.grad = np.array([1.0])
    opt.step()
    assert abs((1.0 - p.data[0]) - 0.01) < 1e-9


def test_decay_only_closed_form():
    # zero gradient, zero moments: w <- w * (1 - lr * lambda)
    p = Parameter(np.array([2.0], dtype=np.float64))
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    p.grad = np.array([0.0])
    opt.step()
    assert abs(p.data[0] - 2.0 * (1.0 - 0.1 * 0.5)) < 1e-12


def test_decoupled_decay_is_separate_from_moment_step():
    # with decay AND gradient, the update is w*(1-lr*lambda) - lr*mhat/(sqrt(vhat)+eps)
    p = Parameter(np.array([1.0], dtype=np.float64))
    opt = AdamW([p], lr=0.01, weight_decay=0.1)
    p.grad = np.array([1.0])
    opt.step()
    expected = 1.0 * (1.0 - 0.01 * 0.1) - 0.01 * 1.0 / (1.0 + 1e-8)
    assert abs(p.data[0] - expected) < 1e-12


def test_step_count_increases():
    p = Parameter(np.array([1.0]))
    opt = AdamW([p])
    p.grad = np.array([1.0], dtype=np.float32)
    opt.step()
    opt.step()
    assert opt.step_count == 2


def test_grad_clipping_scales_to_max_norm():
    a = Parameter(np.array([3.0], dtype=np.float64))
    b = Parameter(np.array([4.0], dtype=np.float64))
    opt = AdamW([a, b])
    a.grad = np.array([3.0])
    b.grad = np.array([4.0])
    norm = opt.clip_grad_norm(1.0)
    assert abs(norm - 5.0) < 1e-12
    assert abs(opt.grad_global_norm() - 1.0) < 1e-12


class TestCosineLr:
    def test_step_zero_is_zero(self):
        assert cosine_lr(0, 10, 100, 0.5) == 0.0

    def test_warmup_end_is_peak(self):
        assert cosine_lr(10, 10, 100, 0.5) == pytest.approx(0.5)

    def test_end_is_zero(self):
        assert cosine_lr(100, 10, 100, 0.5) <= 1e-9 * 0.5

    def test_midpoint_is_half_peak(self):
        assert cosine_lr(55, 10, 100, 0.5) == pytest.approx(0.25)

    def test_warmup_is_linear(self):
        assert cosine_lr(5, 10, 100, 1.0) == pytest.approx(0.5)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(101, 10, 100, 0.5)
        with pytest.raises(ValueError):
            cosine_lr(5, 100, 100, 0.5)

    def test_monotone_decay_after_warmup(self):
        vals = [cosine_lr(s, 10, 100, 1.0) for s in range(10, 101)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        assert vals[0] == pytest.approx(1.0)
        assert math.isclose(vals[-1], 0.0, abs_tol=1e-15)
