import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moedisco.errors import DomainError, NumericalError
from moedisco.optim import LrSchedule, OptimizerState, adamw_step, lr_at


def _step(theta, grad, **kw):
    params = {"w": np.array([theta], dtype=float)}
    state = OptimizerState.for_params(params, **kw)
    adamw_step(params, {"w": np.array([grad], dtype=float)}, state)
    return params["w"][0], state


def test_zero_grad_no_decay_is_fixed_point():
    theta, state = _step(1.0, 0.0, lr=0.1, weight_decay=0.0)
    assert theta == 1.0
    assert state.t == 1


def test_decoupled_decay_only():
    theta, _ = _step(1.0, 0.0, lr=0.1, weight_decay=0.01)
    assert theta == pytest.approx(0.999, abs=1e-15)


def test_first_step_moves_by_lr():
    # bias correction makes the first Adam step exactly lr * g / (|g| + eps')
    theta, _ = _step(0.0, 3.0, lr=0.01, weight_decay=0.0)
    assert theta == pytest.approx(-0.01, rel=1e-6)


def test_quadratic_converges():
    params = {"w": np.array([5.0])}
    state = OptimizerState.for_params(params, lr=0.1, weight_decay=0.0)
    for _ in range(500):
        adamw_step(params, {"w": 2 * params["w"]}, state)
    assert abs(params["w"][0]) < 1e-2
    assert state.t == 500


def test_moments_start_at_zero():
    state = OptimizerState.for_params({"a": np.ones((2, 3))}, lr=1e-3)
    assert state.t == 0
    assert not state.m["a"].any() and not state.v["a"].any()


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(-5, 5), st.integers(1, 5))
def test_update_is_independent_of_theta_without_decay(theta_a, theta_b, g, steps):
    deltas = []
    for theta in (theta_a, theta_b):
        params = {"w": np.array([theta])}
        state = OptimizerState.for_params(params, lr=0.05, weight_decay=0.0)
        for _ in range(steps):
            adamw_step(params, {"w": np.array([g])}, state)
        deltas.append(params["w"][0] - theta)
    assert deltas[0] == pytest.approx(deltas[1], abs=1e-9)


def test_non_finite_gradient_names_path():
    params = {"layer/w": np.ones(2), "layer/b": np.ones(2)}
    state = OptimizerState.for_params(params, lr=0.1)
    with pytest.raises(NumericalError, match="layer/b") as exc:
        adamw_step(params, {"layer/w": np.ones(2), "layer/b": np.array([1.0, np.nan])}, state)
    assert exc.value.context["path"] == "layer/b"
    assert np.array_equal(params["layer/w"], np.ones(2))  # nothing applied


@pytest.mark.parametrize("kw", [dict(betas=(1.0, 0.9)), dict(betas=(0.9, 0.0)), dict(eps=0.0),
                                dict(weight_decay=-1.0), dict(t=-1)])
def test_state_invariants(kw):
    with pytest.raises(DomainError):
        OptimizerState(lr=1e-3, **kw)


def test_constant_schedule():
    s = LrSchedule("constant", 1e-4, 0.0, 100)
    assert all(lr_at(i, s) == 1e-4 for i in range(101))


def test_cosine_warmup_completes():
    s = LrSchedule("cosine", 3e-4, 0.03, 1000)
    assert s.warmup_steps == 30
    assert lr_at(30, s) == pytest.approx(3e-4, rel=1e-15)
    assert lr_at(0, s) == 0.0
    assert lr_at(15, s) == pytest.approx(1.5e-4)
    assert lr_at(1000, s) == pytest.approx(0.0, abs=1e-20)


def test_cosine_midpoint_is_half_peak():
    s = LrSchedule("cosine", 2.0, 0.0, 100)
    assert lr_at(50, s) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(10, 5000), st.floats(0.01, 0.5))
def test_cosine_continuous_at_warmup_boundary(total, ratio):
    s = LrSchedule("cosine", 1.0, ratio, total)
    w = s.warmup_steps
    if w == 0:
        return
    assert lr_at(w, s) == pytest.approx(1.0)
    assert abs(lr_at(w, s) - lr_at(w - 1, s)) <= 1.0 / w + 1e-12
    assert abs(lr_at(w + 1, s) - lr_at(w, s)) <= math.pi / 2 / (total - w) + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 500), st.floats(0.0, 0.9))
def test_cosine_bounded_by_peak(total, ratio):
    s = LrSchedule("cosine", 0.7, ratio, total)
    values = [lr_at(i, s) for i in range(total + 1)]
    assert min(values) >= 0 and max(values) <= 0.7 + 1e-15


@pytest.mark.parametrize("step", [-1, 101])
def test_schedule_step_out_of_range(step):
    with pytest.raises(DomainError):
        lr_at(step, LrSchedule("cosine", 1e-3, 0.1, 100))


@pytest.mark.parametrize("kw", [dict(kind="linear"), dict(peak_lr=0.0), dict(warmup_ratio=1.0),
                                dict(warmup_ratio=-0.1)])
def test_schedule_invariants(kw):
    base = dict(kind="cosine", peak_lr=1e-3, warmup_ratio=0.0, total_steps=10)
    base.update(kw)
    with pytest.raises(DomainError):
        LrSchedule(**base)
