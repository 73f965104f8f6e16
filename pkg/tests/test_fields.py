import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bounded_derham.fields import (Grid, Mollifier, Polynomial, ScalarField, SmoothStep, Tensor, Trig,
                                   cumulative_integral, integrate, load_field, mollifier_sup,
                                   partial_derivative, save_field, scan_mollifier_constants,
                                   simpson_weights, trailing_integral)

# independent mpmath quadrature of the closed-form mollifier (30 digits)
SUP_0_1 = 2.6054065145200277
SUP_01_09 = 3.8949269574249089


def test_grid_box_and_index():
    g = Grid.box(2, 16)
    assert g.shape == (17, 17)
    assert g.h == pytest.approx(1 / 16)
    assert g.index_of(0, 0.5) == 8
    with pytest.raises(ValueError):
        g.index_of(0, 0.51)


def test_grid_rejects_odd_resolution():
    with pytest.raises(ValueError):
        Grid.box(1, 15)


def test_mollifier_unit_integral_and_support():
    m = Mollifier(0.2, 0.7)
    t = np.linspace(0, 1, 4097)
    vals = m(t)
    assert np.all(vals[t <= 0.2] == 0) and np.all(vals[t >= 0.7] == 0)
    assert np.trapezoid(vals, t) == pytest.approx(1.0, abs=1e-12)


def test_narrow_mollifier_does_not_underflow():
    m = Mollifier(0.5, 0.5 + 1 / 16)
    t = np.linspace(0, 1, 2**16 + 1)
    assert np.trapezoid(m(t), t) == pytest.approx(1.0, abs=1e-9)


def test_mollifier_sup_constants():
    assert Mollifier(0.0, 1.0).sup_norm == pytest.approx(SUP_0_1, rel=1e-13)
    assert Mollifier(0.1, 0.9).sup_norm == pytest.approx(SUP_01_09, rel=1e-13)
    assert mollifier_sup(0.1, 0.9) == pytest.approx(SUP_01_09, rel=1e-13)
    scan = scan_mollifier_constants(samples=20_000)
    assert scan["0.1,0.9"]["sup"] == pytest.approx(SUP_01_09, rel=1e-9)


def test_smooth_step_limits_and_symmetry():
    s = SmoothStep(0.0, 1.0)
    assert s(np.array([-1.0, 0.0]))[0] == 0.0
    assert s(np.array([1.0, 2.0]))[1] == 1.0
    assert float(s(np.array(0.5))) == pytest.approx(0.5, abs=1e-14)
    # mpmath quadrature oracle for the running integral at t = 1/4
    assert float(s(np.array(0.25))) == pytest.approx(0.031754957727637776, rel=1e-12)


def test_derivative_generators():
    t = np.linspace(0.0, 1.0, 11)
    tr = Trig(2, 0.3)
    assert np.allclose(tr.derivative()(t), -4 * np.pi * np.sin(4 * np.pi * t + 0.3))
    p = Polynomial((1.0, 2.0, 3.0))
    assert np.allclose(p.derivative()(t), 2.0 + 6.0 * t)


@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4), st.sampled_from([16, 32, 64]))
def test_simpson_exact_on_cubics(coeffs, N):
    g = Grid.box(1, N)
    f = ScalarField.from_generator(g, Tensor((Polynomial(tuple(coeffs)),)))
    exact = sum(c / (k + 1) for k, c in enumerate(coeffs))
    assert integrate(f) == pytest.approx(exact, abs=1e-12 * (1 + sum(map(abs, coeffs))))


def test_simpson_weights_odd_interval_count():
    w = simpson_weights(8, 1 / 7)
    assert w.sum() == pytest.approx(1.0)
    x = np.linspace(0, 1, 8)
    assert (w * x**3).sum() == pytest.approx(0.25)


def test_simpson_convergence_order():
    errs = []
    for N in (16, 32, 64):
        f = ScalarField.from_generator(Grid.box(1, N), Tensor((Trig(1, 0.4),)))
        errs.append(abs(integrate(f, [(0.0, 0.5)]) - (np.sin(np.pi + 0.4) - np.sin(0.4)) / (2 * np.pi)))
    assert errs[0] / errs[1] >= 8 and errs[1] / errs[2] >= 8


@given(st.sampled_from([16, 32]), st.integers(0, 1))
def test_cumulative_integral_starts_at_zero(N, axis):
    g = Grid.box(2, N)
    f = ScalarField.from_generator(g, Tensor((Trig(1), Polynomial((1.0, 1.0)))))
    H = cumulative_integral(f, axis)
    assert np.all(np.take(H.values, 0, axis=axis) == 0.0)
    assert np.max(np.abs(H.values)) <= np.max(np.abs(f.values)) + 1e-12


def test_trailing_integral_total():
    g = Grid.box(2, 128)
    f = ScalarField.from_generator(g, Tensor((Mollifier(0.1, 0.9), Mollifier(0.2, 0.6))))
    total = trailing_integral(f, 1)
    assert total.grid.ndim == 0
    assert float(total.values) == pytest.approx(1.0, abs=1e-10)
    marg = trailing_integral(f, 2)
    assert marg.values.shape == (129,)


def test_partial_derivative_second_order():
    errs = []
    for N in (32, 64):
        g = Grid.box(1, N)
        f = ScalarField.from_generator(g, Tensor((Trig(1),)))
        exact = partial_derivative(f, 0, exact=True)
        errs.append(np.max(np.abs(partial_derivative(f, 0).values - exact.values)))
    assert errs[0] / errs[1] > 3.5


def test_partial_derivative_exact_needs_generator():
    with pytest.raises(ValueError):
        partial_derivative(ScalarField.zeros(Grid.box(1, 16)), 0, exact=True)


def test_field_csv_round_trip(tmp_path):
    g = Grid((0.0, -1.0), 16, (17, 33), (False, True))
    f = ScalarField(g, np.random.default_rng(0).normal(size=g.shape))
    save_field(f, tmp_path / "f.csv")
    back = load_field(tmp_path / "f.csv")
    assert back.grid == g
    assert np.array_equal(back.values, f.values)


def test_margin_is_zero():
    f = ScalarField.from_generator(Grid.box(1, 32), Tensor((Mollifier(0.2, 0.8),)))
    assert f.margin_is_zero(6)
    assert not f.margin_is_zero(12)
