"""Adam and cosine schedule checks against a direct float64 reference."""

import numpy as np
import pytest

from weightmorph.optim import Adam, AdamState, adam_step, cosine_lr
from weightmorph.tensor import NonFiniteError, Tensor


def reference_adam(theta0, grads_seq, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam in float64, one parameter vector."""
    theta = theta0.astype(np.float64).copy()
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads_seq, start=1):
        g = g.astype(np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        theta -= lr * mhat / (np.sqrt(vhat) + eps)
    return theta


def test_adam_matches_reference_over_ten_steps():
    rng = np.random.default_rng(0)
    theta0 = rng.standard_normal(7).astype(np.float32)
    grads_seq = [rng.standard_normal(7).astype(np.float32) for _ in range(10)]

    params = {"w": Tensor(theta0.copy(), requires_grad=True)}
    state = AdamState()
    for g in grads_seq:
        adam_step(params, {"w": g}, state, lr=0.01)

    expected = reference_adam(theta0, grads_seq, lr=0.01)
    np.testing.assert_allclose(params["w"].data, expected, rtol=1e-5, atol=1e-6)


def test_zero_gradient_leaves_parameters_unchanged():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    before = p.data.copy()
    adam_step({"w": p}, {"w": np.zeros(2, dtype=np.float32)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_first_step_magnitude_is_learning_rate():
    # bias correction makes the first update lr * g/|g| up to eps
    p = Tensor(np.array([0.0, 0.0], dtype=np.float32), requires_grad=True)
    g = np.array([0.3, -0.7], dtype=np.float32)
    adam_step({"w": p}, {"w": g}, AdamState(), lr=1e-3)
    np.testing.assert_allclose(np.abs(p.data), 1e-3, rtol=1e-4)
    assert np.sign(p.data[0]) == -1.0 and np.sign(p.data[1]) == 1.0


def test_adam_converges_on_quadratic_bowl():
    p = Tensor(np.array([5.0, -3.0], dtype=np.float32), requires_grad=True)
    state = AdamState()
    for _ in range(800):
        adam_step({"w": p}, {"w": 2.0 * p.data}, state, lr=0.05)
    assert np.abs(p.data).max() < 1e-3


def test_adam_bowl_two_hundred_steps():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    state = AdamState()
    for _ in range(200):
        adam_step({"w": p}, {"w": 2.0 * p.data}, state, lr=0.05)
    assert abs(float(p.data[0])) < 1e-2


def test_non_finite_gradient_aborts():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(NonFiniteError, match="w"):
        adam_step({"w": p}, {"w": np.array([np.inf, 0.0])}, AdamState(), lr=0.1)


def test_cosine_schedule_endpoints_and_midpoint():
    assert cosine_lr(0, 100, 1e-3) == pytest.approx(1e-3)
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)
    assert cosine_lr(200, 100, 1e-3) == pytest.approx(0.0, abs=1e-12)


def test_cosine_schedule_monotone_decreasing():
    vals = [cosine_lr(s, 50, 1e-3) for s in range(51)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_wrapper_collects_grads_and_advances_schedule():
    p = Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    opt = Adam({"w": p}, lr=1e-3, total_steps=10)
    assert opt.lr == pytest.approx(1e-3)
    p.grad = np.array([1.0], dtype=np.float32)
    applied = opt.step()
    assert applied == pytest.approx(1e-3)
    assert p.grad is None
    assert opt.lr < 1e-3  # schedule advanced
