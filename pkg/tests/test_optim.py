"""Adam semantics and the step learning-rate schedule."""

import numpy as np
import pytest

from meshpdm.errors import ValidationError
from meshpdm.optim import Adam, StepSchedule
from meshpdm.tensor import Tensor, backward
from oracles import scalar_adam


def test_zero_gradient_leaves_params_unchanged():
    p = Tensor([1.0, -2.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_first_step_magnitude_is_lr_times_sign():
    p = Tensor([1.0, 1.0], requires_grad=True)
    opt = Adam([p], lr=0.05)
    p.grad = np.array([3.0, -0.25])
    opt.step()
    # bias-corrected m_hat / sqrt(v_hat) == sign(g) at t=1
    np.testing.assert_allclose(p.data, [1.0 - 0.05, 1.0 + 0.05], rtol=1e-6)


def test_quadratic_converges_and_matches_scalar_reference():
    p = Tensor([1.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    for _ in range(100):
        opt.zero_grad()
        backward((p * p).sum())
        opt.step()
    assert abs(p.data[0]) < 0.1
    expected = scalar_adam(lambda w: 2 * w, 1.0, lr=0.1, steps=100)
    assert p.data[0] == pytest.approx(expected, abs=1e-12)


def test_gradient_shape_mismatch_rejected():
    p = Tensor([1.0, 2.0], requires_grad=True)
    opt = Adam([p], lr=0.1)
    p.grad = np.zeros(3)
    with pytest.raises(ValidationError, match="shape"):
        opt.step()


def test_state_roundtrip_bit_exact():
    rng = np.random.default_rng(0)
    p = Tensor(rng.uniform(-1, 1, 4), requires_grad=True)
    opt = Adam([p], lr=0.01)
    for _ in range(3):
        p.grad = rng.uniform(-1, 1, 4)
        opt.step()
    state = opt.state_dict()
    q = Tensor(p.data.copy(), requires_grad=True)
    opt2 = Adam([q], lr=0.01)
    opt2.load_state_dict(state)
    g = rng.uniform(-1, 1, 4)
    p.grad = g.copy()
    q.grad = g.copy()
    opt.step()
    opt2.step()
    np.testing.assert_array_equal(p.data, q.data)


def test_step_schedule_formula_and_monotonicity():
    sched = StepSchedule(0.01, interval=200, factor=0.5)
    assert sched(0) == 0.01
    assert sched(199) == 0.01
    assert sched(200) == pytest.approx(0.005)
    assert sched(999) == pytest.approx(0.01 * 0.5 ** 4)
    lrs = [sched(e) for e in range(1000)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert all(lr > 0 for lr in lrs)


def test_step_schedule_validation():
    with pytest.raises(ValidationError):
        StepSchedule(0.0)
    with pytest.raises(ValidationError):
        StepSchedule(0.1, interval=0)
    with pytest.raises(ValidationError):
        StepSchedule(0.1, factor=1.5)
