import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bounded_derham.fields import Grid, Mollifier
from bounded_derham.forms import DifferentialForm, exterior_derivative
from bounded_derham.poincare import boundary_face_values, kn_constant, primitive_box, primitive_halfbox

# computed independently with mpmath quadrature (30 digits)
K2_ORACLE = 8.78985391484981782
K3_ORACLE = 157.306402012486966


def _bump(N, centre, width):
    t = np.arange(N + 1) / N
    return Mollifier(centre - width / 2, centre + width / 2)(t)


def _zero_integral_form(n, N, rng, touch_face=False, widths=(0.2, 0.4)):
    """Difference of two tensor bumps, rescaled so the trapezoid integral is zero."""
    h = 1.0 / N
    parts = []
    for _ in range(2):
        vecs = []
        for a in range(n):
            w = rng.uniform(*widths)
            c = rng.uniform(0.08 + w / 2, 0.92 - w / 2)
            if touch_face and a == n - 1:
                c = 0.0
                w = rng.uniform(0.4, 0.8)
            vecs.append(_bump(N, c, w))
        arr = np.ones(())
        for v in vecs:
            arr = np.multiply.outer(arr, v)
        parts.append(arr)
    tot = [p for p in parts]
    for a in range(n - 1, -1, -1):
        tot = [np.trapezoid(p, dx=h, axis=a) for p in tot]
    f = parts[0] / float(tot[0]) - parts[1] / float(tot[1])
    return DifferentialForm.from_arrays(Grid.box(n, N), n, {tuple(range(n)): f})


def test_kn_constants_frozen():
    assert kn_constant(1) == 1.0
    assert kn_constant(2) == pytest.approx(K2_ORACLE, rel=1e-12)
    assert kn_constant(3) == pytest.approx(K3_ORACLE, rel=1e-12)


def test_rejects_nonzero_integral():
    N = 32
    f = np.multiply.outer(_bump(N, 0.5, 0.5), _bump(N, 0.5, 0.5))
    w = DifferentialForm.from_arrays(Grid.box(2, N), 2, {(0, 1): f})
    with pytest.raises(ValueError, match="zero-integral"):
        primitive_box(w)


def test_rejects_support_on_margin():
    N = 32
    rng = np.random.default_rng(0)
    w = _zero_integral_form(2, N, rng, touch_face=True)
    with pytest.raises(ValueError, match="margin"):
        primitive_box(w)


def test_rejects_lower_degree():
    with pytest.raises(ValueError):
        primitive_box(DifferentialForm.zeros(Grid.box(2, 16), 1))


@settings(max_examples=15)
@given(st.integers(1, 3), st.integers(0, 10 ** 6))
def test_ratio_bounded_by_kn(n, seed):
    N = 32 if n == 3 else 64
    w = _zero_integral_form(n, N, np.random.default_rng(seed))
    res = primitive_box(w)
    assert res.ratio <= kn_constant(n)


@settings(max_examples=10)
@given(st.integers(1, 2), st.integers(0, 10 ** 6))
def test_primitive_is_compactly_supported(n, seed):
    w = _zero_integral_form(n, 64, np.random.default_rng(seed))
    eta = primitive_box(w).eta
    for I, c in eta.coeffs.items():
        v = c.values
        for a in range(n):
            assert np.all(np.take(v, 0, axis=a) == 0.0)
            assert np.all(np.take(v, -1, axis=a) == 0.0)


def test_residual_converges_second_order():
    res = []
    for N in (128, 256):
        w = _zero_integral_form(2, N, np.random.default_rng(3), widths=(0.5, 0.8))
        res.append(primitive_box(w).residual)
    assert res[0] / res[1] >= 3.5


@settings(max_examples=10)
@given(st.integers(1, 3), st.integers(0, 10 ** 6))
def test_halfbox_face_exactly_zero(n, seed):
    N = 32
    w = _zero_integral_form(n, N, np.random.default_rng(seed), touch_face=True)
    assert np.max(np.abs(np.take(w.top_coefficient, 0, axis=n - 1))) > 0
    res = primitive_halfbox(w)
    assert np.all(boundary_face_values(res.eta) == 0.0)


def test_steps_telescope():
    w = _zero_integral_form(2, 64, np.random.default_rng(1))
    res = primitive_box(w)
    total = sum(exterior_derivative(s).top_coefficient for s in res.steps)
    assert np.max(np.abs(total - w.top_coefficient)) == pytest.approx(res.residual, rel=1e-9)


def test_certificate_roundtrip(tmp_path):
    import json
    w = _zero_integral_form(1, 64, np.random.default_rng(2))
    res = primitive_box(w)
    res.save(tmp_path / "p")
    cert = json.loads((tmp_path / "p.json").read_text())
    assert cert["Kn"] == 1.0 and cert["halfbox"] is False
