"""Norm-controlled primitives of compactly supported top forms on boxes.

Given ``omega = f dx_1 ^ ... ^ dx_n`` with compact support and zero
integral on Q = (0,1)^n (or Q' = (0,1)^{n-1} x [0,1)), the loop below builds
``eta = sum_k nu_k`` with

    g_k = integral of f_k over x_{k+1}..x_n
    h_k = running integral of g_k along x_k from 0
    nu_k = (-1)^{k-1} h_k(x_1..x_k) rho_k(x_{k+1}..x_n) dx_1 ^ .. ^ (no dx_k) ^ .. ^ dx_n
    f_{k+1} = f_k - g_k rho_k

where ``rho_k`` is a tensor mollifier of unit discrete integral.  Since
``d nu_k = g_k rho_k dx_1 ^ ... ^ dx_n`` the sum telescopes to ``omega``; the
update uses that identity instead of differentiating.  A finite-difference
exterior derivative is only used afterwards, to verify.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .fields import Mollifier, mollifier_sup
from .forms import DifferentialForm, exterior_derivative, save_form, sup_norm_form

__all__ = [
    "PrimitiveResult",
    "primitive_box",
    "primitive_halfbox",
    "kn_constant",
    "RHO_SUPPORT",
]

RHO_SUPPORT = (0.1, 0.9)
ZERO_REL = 1e-13


@dataclass
class PrimitiveResult:
    eta: DifferentialForm
    steps: list = field(repr=False)
    residual: float
    ratio: float
    kn: float
    integral: float
    condition_probes: list
    halfbox: bool = False

    def certificate(self) -> dict:
        return {
            "residual": self.residual,
            "ratio": self.ratio,
            "Kn": self.kn,
            "integral": self.integral,
            "condition_probes": self.condition_probes,
            "halfbox": self.halfbox,
        }

    def save(self, stem) -> None:
        save_form(self.eta, f"{stem}.npz")
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.certificate(), fh, indent=2)


def kn_constant(n: int, support: tuple[float, float] = RHO_SUPPORT) -> float:
    """``K_n = sum_k r_k prod_{j<k} (1 + r_j)`` with ``r_k = sup(rho_k)`` for k < n and ``r_n = 1``.

    ``rho_k`` is a tensor product of ``n - k`` one-dimensional mollifiers, so
    its sup is the 1D sup raised to that power.
    """
    if n < 1:
        raise ValueError("dimension must be positive")
    r1 = mollifier_sup(*support)
    r = [r1 ** (n - k) for k in range(1, n)] + [1.0]
    total, prod = 0.0, 1.0
    for rk in r:
        total += rk * prod
        prod *= 1.0 + rk
    return total


def _rho_1d(NQ: int, support) -> np.ndarray:
    t = np.arange(NQ + 1) / NQ
    b = Mollifier(*support)(t)
    return b / np.trapezoid(b, dx=1.0 / NQ)


def _tensor(vectors: list[np.ndarray]) -> np.ndarray:
    out = np.ones(())
    for v in vectors:
        out = np.multiply.outer(out, v)
    return out


def _check_box(omega: DifferentialForm) -> int:
    grid = omega.grid
    n = grid.ndim
    if omega.degree != n:
        raise ValueError("the primitive construction needs a top-degree form")
    NQ = grid.n_per_unit
    if any(grid.periodic) or any(l != 0.0 for l in grid.lower) or any(c != NQ + 1 for c in grid.counts):
        raise ValueError("form must live on the unit box grid")
    return NQ


def _margin_violation(f: np.ndarray, layers: int, skip_lower_last: bool) -> float:
    n = f.ndim
    worst = 0.0
    for a in range(n):
        m = f.shape[a]
        lo = np.take(f, range(layers), axis=a)
        hi = np.take(f, range(m - layers, m), axis=a)
        if not (skip_lower_last and a == n - 1):
            worst = max(worst, float(np.max(np.abs(lo))))
        worst = max(worst, float(np.max(np.abs(hi))))
    return worst


def _snap_tail(hk: np.ndarray, gk: np.ndarray, axis: int) -> float:
    """Zero the constant tail of a running integral beyond the support of its integrand."""
    other = tuple(a for a in range(gk.ndim) if a != axis)
    prof = np.max(np.abs(gk), axis=other) if other else np.abs(gk)
    nz = np.flatnonzero(prof)
    if nz.size == 0:
        hk[...] = 0.0
        return 0.0
    last = nz[-1]
    sl = [slice(None)] * hk.ndim
    sl[axis] = slice(last + 1, None)
    tail = hk[tuple(sl)]
    probe = float(np.max(np.abs(tail))) if tail.size else 0.0
    hk[tuple(sl)] = 0.0
    return probe


def _primitive(omega: DifferentialForm, margin: float, tol: float | None, halfbox: bool,
               support=RHO_SUPPORT, verify: bool = True) -> PrimitiveResult:
    NQ = _check_box(omega)
    grid = omega.grid
    n = grid.ndim
    h = 1.0 / NQ
    f0 = omega.top_coefficient
    norm = float(np.max(np.abs(f0))) if f0.size else 0.0
    layers = max(1, int(np.ceil(margin * NQ - 1e-9)))
    bad = _margin_violation(f0, layers, halfbox)
    if bad > ZERO_REL * max(norm, 1e-300):
        raise ValueError(f"support touches the {layers}-sample margin (|omega| = {bad:.3e} there)")

    v = f0
    for a in range(n - 1, -1, -1):
        v = np.trapezoid(v, dx=h, axis=a)
    total = float(v)
    tol = 10.0 * h * h * norm if tol is None else tol
    if abs(total) > tol:
        raise ValueError(f"form integral {total!r} exceeds the zero-integral tolerance {tol!r}")

    rho1 = _rho_1d(NQ, support)
    f = f0 - total * _tensor([rho1] * n)
    steps = []
    probes = []
    coeffs = {}
    for k in range(1, n + 1):
        # g(x_1..x_k): integrate out axes k+1..n (0-based k..n-1)
        g = f
        for a in range(n - 1, k - 1, -1):
            g = np.trapezoid(g, dx=h, axis=a)
        hk = np.zeros_like(g)
        gm = np.moveaxis(g, k - 1, 0)
        hm = np.moveaxis(hk, k - 1, 0)
        hm[1:] = np.cumsum(0.5 * (gm[:-1] + gm[1:]), axis=0) * h
        probes.append(_snap_tail(hk, g, k - 1))
        rho_k = _tensor([rho1] * (n - k))
        nu_vals = ((-1.0) ** (k - 1)) * np.multiply.outer(hk, rho_k)
        I = tuple(a for a in range(n) if a != k - 1)
        nu = DifferentialForm.from_arrays(grid, n - 1, {I: nu_vals})
        steps.append(nu)
        coeffs[I] = nu_vals
        f = f - np.multiply.outer(g, rho_k)
    eta = DifferentialForm.from_arrays(grid, n - 1, coeffs)

    residual = float("nan")
    if verify:
        d_eta = exterior_derivative(eta)
        residual = float(np.max(np.abs(d_eta.top_coefficient - f0)))
    eta_norm = sup_norm_form(eta)
    ratio = eta_norm / norm if norm > 0 else 0.0
    kn = kn_constant(n, support)
    if ratio > kn:
        raise AssertionError(f"norm bound violated: |eta|/|omega| = {ratio!r} > K_{n} = {kn!r}")
    if halfbox:
        face = boundary_face_values(eta)
        if np.any(face != 0.0):
            raise AssertionError("boundary pullback of the primitive is not exactly zero")
    return PrimitiveResult(eta, steps, residual, ratio, kn, total, probes, halfbox)


def boundary_face_values(eta: DifferentialForm) -> np.ndarray:
    """Tangential coefficients of an (n-1)-form on the face ``x_n = 0``."""
    n = eta.n
    tangential = tuple(range(n - 1))
    return np.take(eta[tangential], 0, axis=n - 1)


def primitive_box(omega: DifferentialForm, margin: float = 0.0, tol: float | None = None,
                  verify: bool = True) -> PrimitiveResult:
    """Compactly supported primitive on Q with ``|eta| <= K_n |omega|``.

    ``margin`` (fraction of the unit side, at least one sample layer) must be
    free of support on every face.  ``tol`` bounds the admissible
    integral; it defaults to ``10 h^2 |omega|``.
    """
    return _primitive(omega, margin, tol, halfbox=False, verify=verify)


def primitive_halfbox(omega: DifferentialForm, margin: float = 0.0, tol: float | None = None,
                      verify: bool = True) -> PrimitiveResult:
    """Primitive on Q' whose tangential part vanishes exactly on ``x_n = 0``.

    The support may reach the face ``x_n = 0``; the other faces keep the margin.
    """
    return _primitive(omega, margin, tol, halfbox=True, verify=verify)
