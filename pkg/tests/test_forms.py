import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bounded_derham.fields import Grid, Mollifier, ScalarField, Tensor, Trig, integrate
from bounded_derham.forms import (DifferentialForm, TubeEmbedding, boundary_restriction, exterior_derivative,
                                  load_form, multi_indices, pullback_translation, pushforward_tube,
                                  save_form, sup_norm_form)


def test_multi_indices_lexicographic():
    assert multi_indices(3, 2) == [(0, 1), (0, 2), (1, 2)]
    assert multi_indices(2, 0) == [()]


def test_form_rejects_bad_degree():
    with pytest.raises(ValueError):
        DifferentialForm.zeros(Grid.box(2, 16), 3)


@given(arrays(np.float64, (17, 17), elements=st.floats(-1, 1)))
def test_dd_vanishes_on_zero_forms(vals):
    f = DifferentialForm.from_arrays(Grid.box(2, 16), 0, {(): vals})
    dd = exterior_derivative(exterior_derivative(f))
    assert np.max(np.abs(dd.top_coefficient)) <= 1e-9 * (1 + np.max(np.abs(vals)) * 16**2)


@given(arrays(np.float64, (9, 9, 9), elements=st.floats(-1, 1)), st.integers(0, 2))
def test_dd_vanishes_on_one_forms_3d(vals, axis):
    g = Grid.box(3, 8)
    I = (axis,)
    f = DifferentialForm.from_arrays(g, 1, {I: vals})
    dd = exterior_derivative(exterior_derivative(f))
    assert np.max(np.abs(dd.top_coefficient)) <= 1e-10 * 64


def test_exact_derivative_matches_fd():
    g = Grid.box(2, 64)
    gen = Tensor((Trig(1), Mollifier(0.1, 0.9)))
    zero = ScalarField.from_generator(g, gen.scaled(0.0))
    f = DifferentialForm(g, 1, {(0,): ScalarField.from_generator(g, gen), (1,): zero})
    ex = exterior_derivative(f, exact=True).top_coefficient
    fd = exterior_derivative(f).top_coefficient
    # d(f dx_0) = -df/dx_1 dx_0 ^ dx_1
    assert np.max(np.abs(ex - fd)) < 5e-2 * np.max(np.abs(ex))
    assert ex[10, 40] == pytest.approx(-gen.derivative(1)(10 / 64, 40 / 64))


def test_pullback_translation_moves_samples():
    g = Grid((-2.0,), 16, (65,))
    gen = Tensor((Mollifier(0.0, 1.0),))
    w = DifferentialForm.top(ScalarField.from_generator(g, gen))
    moved = pullback_translation(w, (1.0,))
    assert np.allclose(moved.top_coefficient, gen(g.axis_points(0) + 1.0))
    off = pullback_translation(w, (1 / 3,))
    assert np.allclose(off.top_coefficient, gen(g.axis_points(0) + 1 / 3))


def test_tube_orientation_and_box():
    t = TubeEmbedding(np.array([[0.0, 0.75], [-0.75, 0.0]]), np.array([0.0, 1.0]))
    assert t.orientation_preserving
    lo, hi = t.image_box()
    assert np.allclose(lo, [0.0, 0.25]) and np.allclose(hi, [0.75, 1.0])
    L, perm, signs = t.signed_permutation()
    assert L == 0.75 and perm == [1, 0] and signs == [-1, 1]


def test_pushforward_preserves_integral_aligned_and_interpolated():
    NQ = 24
    q = Grid.box(2, NQ)
    rho = DifferentialForm.top(ScalarField.from_generator(q, Tensor((Mollifier(0.2, 0.8), Mollifier(0.1, 0.6)))))
    q_int = integrate(rho.coeffs[(0, 1)])
    theta = TubeEmbedding(np.array([[0.0, 0.75], [-0.75, 0.0]]), np.array([0.25, 1.0]))
    target = Grid((0.0, 0.0), 32, (41, 41))
    pushed = pushforward_tube(rho, theta, target)
    # det A = L^2, so the integral over M equals the integral over Q
    assert integrate(pushed.coeffs[(0, 1)]) == pytest.approx(q_int, rel=1e-12)
    rot = np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]]) * 0.6
    theta2 = TubeEmbedding(rot, np.array([0.3, 0.2]))
    big = Grid((0.0, 0.0), 128, (161, 161))
    fine = DifferentialForm.top(ScalarField.from_generator(Grid.box(2, 96), Tensor((Mollifier(0.2, 0.8), Mollifier(0.1, 0.6)))))
    pushed2 = pushforward_tube(fine, theta2, big, order=3)
    assert integrate(pushed2.coeffs[(0, 1)]) == pytest.approx(1.0, abs=2e-3)


def test_pushforward_one_form_pulls_back():
    NQ = 16
    q = Grid.box(2, NQ)
    a = np.random.default_rng(1).normal(size=q.shape)
    nu = DifferentialForm.from_arrays(q, 1, {(0,): a, (1,): np.zeros(q.shape)})
    theta = TubeEmbedding(np.array([[0.5, 0.0], [0.0, 0.5]]), np.array([0.25, 0.25]))
    out = pushforward_tube(nu, theta, Grid.box(2, 32))
    # y = 2 (x - c): dy_0 = 2 dx_0
    assert np.allclose(out[(0,)][8:25, 8:25], 2 * a)
    assert np.all(out[(1,)] == 0)


def test_save_load_round_trip(tmp_path):
    g = Grid((0.0, -1.0), 16, (17, 33), (False, True))
    rng = np.random.default_rng(2)
    w = DifferentialForm.from_arrays(g, 1, {(0,): rng.normal(size=g.shape), (1,): rng.normal(size=g.shape)})
    save_form(w, tmp_path / "w.npz")
    back = load_form(tmp_path / "w.npz")
    assert back.grid == g and back.degree == 1
    for I in w.coeffs:
        assert np.array_equal(back[I], w[I])


def test_boundary_restriction_keeps_tangential_part():
    g = Grid((0.0, 0.0), 16, (33, 17), (True, False))
    rng = np.random.default_rng(3)
    w = DifferentialForm.from_arrays(g, 1, {(0,): rng.normal(size=g.shape), (1,): rng.normal(size=g.shape)})
    faces = boundary_restriction(w, 1)
    assert np.array_equal(faces["lower"][(0,)], w[(0,)][:, 0])
    assert np.array_equal(faces["upper"][(0,)], w[(0,)][:, -1])


def test_sup_norm_is_euclidean():
    g = Grid.box(2, 16)
    w = DifferentialForm.from_arrays(g, 1, {(0,): np.full(g.shape, 3.0), (1,): np.full(g.shape, 4.0)})
    assert sup_norm_form(w) == pytest.approx(5.0)
