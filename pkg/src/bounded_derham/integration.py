"""The integration map from bounded top forms to bounded functions on G.

``(int^phi omega)(g) = int_M phi * g^* omega`` where ``g^*`` is the pullback
along ``x -> x + g``.  Partition functions are stored as a block covering
two cells per group axis (all of each bounded axis) together with a cell
offset, so translating ``phi`` by a group element only moves the offset.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .forms import DifferentialForm, boundary_restriction, exterior_derivative
from .group import (
    CoinvariantCertificate,
    EllInftyFn,
    act,
    certify_trivial,
    check_certificate,
    fingerprint,
)
from .models import Model, ModelForm, extract_block, lattice_weights, line_model, weighted_total

__all__ = [
    "PartitionFunction",
    "build_phi_indicator",
    "build_phi_smooth",
    "phi_values",
    "integrate_phi",
    "class_of",
    "check_phi_independence",
    "check_equivariance",
    "StokesReport",
    "stokes_check",
]

BLOCK_CELLS = 2


@dataclass(frozen=True, eq=False)
class PartitionFunction:
    """Compactly supported ``phi`` with orbit sums equal to one.

    ``values`` covers cells ``offset .. offset + 2`` on every group axis
    (``2N + 1`` samples) and the whole of each bounded axis.  ``pieces``
    holds the lifted ``phi_i`` of a smooth partition.
    """

    model: Model
    N: int
    values: np.ndarray
    offset: tuple[int, ...]
    mode: str
    pieces: tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __post_init__(self):
        shape = block_shape(self.model, self.N)
        if self.values.shape != shape:
            raise ValueError(f"partition block must have shape {shape}, got {self.values.shape}")

    def shifted(self, g: Sequence[int]) -> "PartitionFunction":
        """``g . phi``, i.e. ``x -> phi(x - g)``."""
        g = self.model.group.normalize(g)
        off = tuple(o + a for o, a in zip(self.offset, g))
        if self.model.finite:
            off = self.model.group.normalize(off)
        return replace(self, offset=off)

    def orbit_sums(self) -> np.ndarray:
        """``sum_g phi(x + g)`` at every sample of the cell at ``offset``."""
        N = self.N
        v = self.values
        for a in self.model.group_axes:
            v = np.moveaxis(v, a, 0)
            padded = np.concatenate([v, np.zeros((BLOCK_CELLS * N + N - v.shape[0],) + v.shape[1:])])
            v = padded.reshape((BLOCK_CELLS + 1, N) + v.shape[1:]).sum(axis=0)
            v = np.moveaxis(v, 0, a)
        return v

    def integral(self) -> float:
        return weighted_total(self.values, lattice_weights(self.model, self.N, self.values.shape))


def block_shape(model: Model, N: int) -> tuple[int, ...]:
    return tuple(BLOCK_CELLS * N + 1 if a in model.group_axes else N + 1 for a in range(model.n))


def block_coordinates(model: Model, N: int) -> list[np.ndarray]:
    """Sparse mesh of block sample coordinates for offset 0."""
    shape = block_shape(model, N)
    axes = [np.arange(m) / N for m in shape]
    return np.meshgrid(*axes, indexing="ij", sparse=True)


def build_phi_indicator(model: Model, N: int) -> PartitionFunction:
    """Indicator of the unit cell ``[0, 1)^d`` on the group axes.

    On the vertex grid each orbit meets the half-open cell in exactly one
    sample, so orbit sums are exactly 1.
    """
    model.check_resolution(N)
    vals = np.zeros(block_shape(model, N))
    sl = tuple(slice(0, N) if a in model.group_axes else slice(None) for a in range(model.n))
    vals[sl] = 1.0
    return PartitionFunction(model, N, vals, model.group.identity(), "indicator")


def build_phi_smooth(cover, N: int) -> PartitionFunction:
    """``phi = sum_i phi_i`` with ``phi_i`` the partition maps lifted to the chosen lifts."""
    model = cover.model
    model.check_resolution(N)
    mesh = block_coordinates(model, N)
    pieces = tuple(np.broadcast_to(p.lifted(*mesh), block_shape(model, N)).copy() for p in cover.patches)
    vals = np.sum(pieces, axis=0)
    return PartitionFunction(model, N, vals, model.group.identity(), "smooth", pieces)


def _block_start(model: Model, grid, cell: Sequence[int]) -> list[int]:
    x = np.zeros(model.n)
    for a, c in zip(model.group_axes, cell):
        x[a] = c
    for a in model.bounded_axes:
        x[a] = grid.lower[a]
    return model.sample_of(grid, x)


def _element_range(model: Model, R: int, offset: Sequence[int]) -> list[tuple[int, ...]]:
    """Elements ``g`` whose block ``offset + g + [0, 2)`` lies inside the window."""
    if model.finite:
        return list(model.group.window())
    import itertools
    rngs = [range(-R - o, R - BLOCK_CELLS + 1 - o + 1) for o in offset]
    return list(itertools.product(*rngs))


def phi_values(model: Model, N: int, block: np.ndarray, offset: Sequence[int], window_values: np.ndarray,
               grid, elements: Sequence[Sequence[int]]) -> dict:
    """``g -> sum_x w(x) block(x) * window(x + offset + g)`` for the listed ``g``."""
    weights = lattice_weights(model, N, block.shape)
    wb = block
    out = {}
    for g in elements:
        cell = tuple(o + a for o, a in zip(offset, g))
        start = _block_start(model, grid, cell)
        sub = extract_block(window_values, start, block.shape, grid.periodic)
        out[tuple(g)] = weighted_total(wb * sub, weights)
    return out


def _periodic_block(model: Model, N: int, cell_values: np.ndarray, shape) -> np.ndarray:
    v = cell_values
    for a in model.group_axes:
        reps = [1] * model.n
        reps[a] = -(-shape[a] // N)
        v = np.tile(v, reps)
    return v[tuple(slice(0, m) for m in shape)]


def required_radius(model: Model, omega: ModelForm) -> int:
    """Smallest window radius whose outer cell layer misses the local support."""
    if model.finite or omega.local is None:
        return 0
    grid = omega.local.grid
    v = np.abs(omega.local.top_coefficient)
    if not np.any(v):
        return 1
    need = 1
    for a in model.group_axes:
        other = tuple(b for b in range(model.n) if b != a)
        nz = np.flatnonzero(v.max(axis=other) if other else v)
        x = grid.axis_points(a)
        lo, hi = x[nz[0]], x[nz[-1]]
        need = max(need, int(np.ceil(1 - lo - 1e-12)), int(np.ceil(hi - 1e-12)))
    return need


def integrate_phi(phi: PartitionFunction, omega: ModelForm, R: int | None = None) -> EllInftyFn:
    """Evaluate ``g -> int phi * g^* omega`` and package it as an EllInftyFn.

    The periodic part gives the background; the local part gives the
    deviation at every ``g`` whose block fits in the window.
    """
    model = phi.model
    if omega.degree != model.n:
        raise ValueError("the integration map needs a top-degree form")
    if omega.N != phi.N:
        raise ValueError("form and partition function use different resolutions")
    R = omega.R if R is None else R
    if R != omega.R:
        raise ValueError("window radius differs from the form's window")
    grp = model.group
    background = 0.0
    if omega.periodic is not None:
        blk = _periodic_block(model, phi.N, omega.periodic.top_coefficient, phi.values.shape)
        background = weighted_total(phi.values * blk, lattice_weights(model, phi.N, blk.shape))
    deviation = {}
    if omega.local is not None:
        need = required_radius(model, omega)
        if need > R:
            raise ValueError(f"window radius {R} too small for the local part; required R >= {need}")
        elems = _element_range(model, R, phi.offset)
        vals = phi_values(model, phi.N, phi.values, phi.offset, omega.local.top_coefficient,
                          omega.local.grid, elems)
        deviation = {g: v for g, v in vals.items() if v != 0.0}
    return EllInftyFn(grp, background, deviation)


def class_of(omega: ModelForm, phi: PartitionFunction, R: int | None = None) -> tuple[float, EllInftyFn]:
    """Coinvariant fingerprint and the representative ``int^phi omega``."""
    f = integrate_phi(phi, omega, R)
    return fingerprint(f), f


def check_phi_independence(phi1: PartitionFunction, phi2: PartitionFunction, omega: ModelForm,
                           R: int | None = None, tol: float = 1e-9) -> CoinvariantCertificate:
    """Certificate that ``int^phi1 omega - int^phi2 omega`` is a sum of coboundaries."""
    d = integrate_phi(phi1, omega, R) - integrate_phi(phi2, omega, R)
    if abs(fingerprint(d)) > tol:
        raise AssertionError(f"phi-independence: class difference {fingerprint(d)!r} exceeds {tol!r}")
    cert = certify_trivial(d, tol)
    R = omega.R if R is None else R
    if not check_certificate(d, cert, R):
        raise AssertionError("phi-independence: check_certificate rejected the certificate")
    return cert


def check_equivariance(phi: PartitionFunction, omega: ModelForm, g: Sequence[int], R: int | None = None) -> bool:
    """Exact check of ``int^{g.phi} omega == g . int^phi omega`` on the window."""
    lhs = integrate_phi(phi.shifted(g), omega, R)
    rhs = act(g, integrate_phi(phi, omega, R))
    model = phi.model
    R = omega.R if R is None else R
    pts = model.elements(R)
    return lhs.background == rhs.background and all(lhs(h) == rhs(h) for h in pts)


# ---------------------------------------------------------------------------
# Stokes on the strip


@dataclass
class StokesReport:
    bulk: EllInftyFn
    boundary: EllInftyFn
    bulk_fingerprint: float
    boundary_fingerprint: float
    certificate: CoinvariantCertificate
    certified: bool
    boundary_lower: dict
    boundary_upper: dict

    @property
    def gap(self) -> float:
        return abs(self.bulk_fingerprint - self.boundary_fingerprint)


def _restrict_phi(phi: PartitionFunction, side: int) -> PartitionFunction:
    model = line_model()
    normal = phi.model.bounded_axes[0]
    vals = np.take(phi.values, side, axis=normal)
    return PartitionFunction(model, phi.N, np.ascontiguousarray(vals), phi.offset, phi.mode)


def _restrict_form(omega: ModelForm, side: str) -> ModelForm:
    normal = omega.model.bounded_axes[0]
    loc = boundary_restriction(omega.local, normal)[side] if omega.local is not None else None
    per = boundary_restriction(omega.periodic, normal)[side] if omega.periodic is not None else None
    return ModelForm(line_model(), omega.N, omega.R, omega.degree, loc, per)


def exterior_derivative_model(omega: ModelForm) -> ModelForm:
    """Exact (generator-based) exterior derivative of both parts."""
    loc = exterior_derivative(omega.local, exact=True) if omega.local is not None else None
    per = exterior_derivative(omega.periodic, exact=True) if omega.periodic is not None else None
    return ModelForm(omega.model, omega.N, omega.R, omega.degree + 1, loc, per)


def stokes_check(omega: ModelForm, phi: PartitionFunction, R: int | None = None,
                 tol: float = 1e-6) -> StokesReport:
    """Compare the class of ``d omega`` on M with the class of its boundary restriction.

    The boundary lines are oriented by the outward normal: the bottom line
    along ``+e1`` and the top line along ``-e1``.
    """
    model = omega.model
    if not model.has_boundary:
        raise ValueError("Stokes check needs a model with boundary")
    if omega.degree != model.n - 1:
        raise ValueError("Stokes check needs an (n-1)-form")
    R = omega.R if R is None else R
    bulk = integrate_phi(phi, exterior_derivative_model(omega), R)
    lower = integrate_phi(_restrict_phi(phi, 0), _restrict_form(omega, "lower"), R)
    upper = integrate_phi(_restrict_phi(phi, -1), _restrict_form(omega, "upper"), R)
    boundary = lower - upper
    diff = bulk - boundary
    cert = certify_trivial(diff, tol)
    ok = check_certificate(diff, cert, R)
    return StokesReport(bulk, boundary, fingerprint(bulk), fingerprint(boundary), cert, ok,
                        {g: lower(g) for g in model.elements(R)}, {g: upper(g) for g in model.elements(R)})
