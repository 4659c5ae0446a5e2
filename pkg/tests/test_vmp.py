import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bikvil.errors import PreconditionError
from bikvil.vmp import Vmp, adapt, fit_vmp

X = np.linspace(0, 1, 200)


def sinusoid(T=200, amp=0.05):
    t = np.linspace(0, 1, T)
    return np.c_[0.3 * t, amp * np.sin(2 * np.pi * t), 0.1 * t**2]


def test_straight_line_fits_below_one_mm():
    line = np.linspace([0, 0, 0], [0.3, -0.2, 0.1], 100)
    assert fit_vmp([line]).rms < 1e-3


def test_constant_trajectory():
    v = fit_vmp([np.tile([0.1, 0.2, 0.3], (50, 1))])
    assert np.allclose(v(X), [0.1, 0.2, 0.3], atol=1e-9)


def test_sinusoid_with_twenty_basis_functions():
    assert fit_vmp([sinusoid()], n_basis=20).rms < 2e-3


def test_endpoints_reproduced_exactly():
    v = fit_vmp([sinusoid()])
    assert np.allclose(v(0.0), v.start, atol=1e-12) and np.allclose(v(1.0), v.goal, atol=1e-12)


def test_mean_of_several_demos():
    a, b = sinusoid(amp=0.04), sinusoid(T=150, amp=0.06)
    v = fit_vmp([a, b])
    assert np.allclose(v.start, 0.0) and v.variance is not None and v.variance.shape == (200, 3)


def test_too_short_rejected():
    with pytest.raises(PreconditionError):
        fit_vmp([np.zeros((5, 3))], n_basis=20)
    with pytest.raises(PreconditionError):
        fit_vmp([])


@given(st.floats(0.05, 0.95), st.lists(st.floats(-0.3, 0.3), min_size=3, max_size=3),
       st.lists(st.floats(-0.5, 0.5), min_size=3, max_size=3))
def test_via_point_and_goal_interpolation(x, via, goal):
    v = adapt(fit_vmp([sinusoid()]), new_goal=goal, extra_via=[(x, via)])
    assert np.max(np.abs(v(x) - via)) <= 1e-6
    assert np.max(np.abs(v(1.0) - goal)) <= 1e-6
    assert np.max(np.abs(v(0.0) - v.start)) <= 1e-6


def test_adapt_idempotent():
    v = adapt(fit_vmp([sinusoid()]), extra_via=[(0.4, [0.1, 0.0, 0.0])])
    w = adapt(v)
    assert np.allclose(v(X), w(X), atol=1e-9)


def test_goal_shift_moves_goal_and_keeps_shape_nearby():
    v = fit_vmp([sinusoid()])
    w = adapt(v, new_goal=v.goal + [0.05, 0, 0])
    assert np.allclose(w(1.0), v.goal + [0.05, 0, 0], atol=1e-12)
    assert np.max(np.abs(w(X) - v(X))) <= 0.05 + 1e-12


def test_conflicting_vias_rejected():
    v = fit_vmp([sinusoid()])
    with pytest.raises(PreconditionError):
        adapt(v, extra_via=[(0.5, [0, 0, 0]), (0.5, [1, 0, 0])])
    with pytest.raises(PreconditionError):
        adapt(v, extra_via=[(1.5, [0, 0, 0])])
    with pytest.raises(PreconditionError):
        adapt(v, extra_via=[(1.0, v.goal + 1)])


@given(st.floats(0.02, 0.98))
def test_phase_derivative_matches_finite_difference(x):
    v = adapt(fit_vmp([sinusoid()]), extra_via=[(0.3, [0.05, 0.1, 0.0])])
    h = 1e-6
    _, d, _ = v.evaluate(x)
    fd = (v(x + h) - v(x - h)) / (2 * h)
    assert np.linalg.norm(d - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-3)


def test_clamping_flag():
    v = fit_vmp([sinusoid()])
    val, _, clamped = v.evaluate(1.3)
    assert clamped and np.allclose(val, v.goal)
    assert not v.evaluate(0.5)[2]


def test_quintic_coefficients():
    v = fit_vmp([sinusoid()])
    a = v.quintic_coefficients()
    x = 0.37
    assert np.allclose(sum(a[k] * x**k for k in range(6)), v.elementary(x)[0], atol=1e-14)


def test_json_round_trip():
    v = adapt(fit_vmp([sinusoid()]), extra_via=[(0.5, [0.1, 0.1, 0.1])])
    w = Vmp.from_json(v.to_json())
    assert np.array_equal(v(X), w(X)) and len(w.via_points) == 1
