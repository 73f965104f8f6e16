"""Differential forms with grid-sampled coefficients.

A k-form on an n-dimensional grid stores one :class:`ScalarField` per
increasing multi-index ``I`` (0-based axis tuples), meaning
``sum_I c_I dx_I``.  The metric is always the flat one of the model
geometry, so coordinate frames are orthonormal.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy import ndimage

from .fields import GeneratorSum, Grid, ScalarField, Shifted, partial_derivative

__all__ = [
    "multi_indices",
    "DifferentialForm",
    "exterior_derivative",
    "sup_norm_form",
    "shift_samples",
    "pullback_translation",
    "TubeEmbedding",
    "pushforward_tube",
    "boundary_restriction",
    "save_form",
    "load_form",
]


def multi_indices(n: int, k: int) -> list[tuple[int, ...]]:
    return list(itertools.combinations(range(n), k))


class DifferentialForm:
    def __init__(self, grid: Grid, degree: int, coeffs: Mapping[tuple[int, ...], ScalarField] | None = None):
        n = grid.ndim
        if not 0 <= degree <= n:
            raise ValueError(f"degree {degree} out of range for dimension {n}")
        self.grid = grid
        self.degree = degree
        coeffs = dict(coeffs or {})
        full = {}
        for I in multi_indices(n, degree):
            f = coeffs.pop(I, None)
            if f is None:
                f = ScalarField.zeros(grid)
            elif f.grid != grid:
                raise ValueError(f"coefficient {I} lives on a different grid")
            full[I] = f
        if coeffs:
            raise ValueError(f"invalid multi-indices {sorted(coeffs)} for degree {degree}")
        self.coeffs = full

    @classmethod
    def from_arrays(cls, grid: Grid, degree: int, arrays: Mapping[tuple[int, ...], np.ndarray]) -> "DifferentialForm":
        return cls(grid, degree, {I: ScalarField(grid, a) for I, a in arrays.items()})

    @classmethod
    def top(cls, field: ScalarField) -> "DifferentialForm":
        n = field.grid.ndim
        return cls(field.grid, n, {tuple(range(n)): field})

    @classmethod
    def zeros(cls, grid: Grid, degree: int) -> "DifferentialForm":
        return cls(grid, degree)

    @property
    def n(self) -> int:
        return self.grid.ndim

    @property
    def top_coefficient(self) -> np.ndarray:
        if self.degree != self.n:
            raise ValueError("not a top-degree form")
        return self.coeffs[tuple(range(self.n))].values

    def __getitem__(self, I: tuple[int, ...]) -> np.ndarray:
        return self.coeffs[tuple(I)].values

    def arrays(self) -> dict[tuple[int, ...], np.ndarray]:
        return {I: f.values for I, f in self.coeffs.items()}

    def map_arrays(self, fn) -> "DifferentialForm":
        return DifferentialForm.from_arrays(self.grid, self.degree, {I: fn(a) for I, a in self.arrays().items()})

    def _check(self, other: "DifferentialForm") -> None:
        if self.grid != other.grid or self.degree != other.degree:
            raise ValueError("forms differ in grid or degree")

    def __add__(self, other: "DifferentialForm") -> "DifferentialForm":
        self._check(other)
        return DifferentialForm(self.grid, self.degree, {I: self.coeffs[I] + other.coeffs[I] for I in self.coeffs})

    def __sub__(self, other: "DifferentialForm") -> "DifferentialForm":
        self._check(other)
        return DifferentialForm(self.grid, self.degree, {I: self.coeffs[I] - other.coeffs[I] for I in self.coeffs})

    def __mul__(self, c: float) -> "DifferentialForm":
        return DifferentialForm(self.grid, self.degree, {I: f * c for I, f in self.coeffs.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "DifferentialForm":
        return self * -1.0

    def __repr__(self) -> str:
        return f"DifferentialForm(n={self.n}, degree={self.degree}, shape={self.grid.shape})"


def exterior_derivative(omega: DifferentialForm, exact: bool = False) -> DifferentialForm:
    """Coordinate exterior derivative.

    ``exact=True`` differentiates the analytic generators; otherwise
    second-order finite differences are used.
    """
    n, k = omega.n, omega.degree
    if k >= n:
        raise ValueError("a top-degree form has no exterior derivative")
    out = {J: np.zeros(omega.grid.shape) for J in multi_indices(n, k + 1)}
    gens: dict = {J: [] for J in out}
    for I, c in omega.coeffs.items():
        for j in range(n):
            if j in I:
                continue
            if not exact and not np.any(c.values):
                continue
            J = tuple(sorted(I + (j,)))
            sign = -1.0 if sum(1 for i in I if i < j) % 2 else 1.0
            d = partial_derivative(c, j, exact=exact)
            out[J] += sign * d.values
            if exact:
                gens[J].append(d.generator.scaled(sign))
    fields = {}
    for J, a in out.items():
        gen = None
        if exact and gens[J]:
            gen = GeneratorSum(tuple(gens[J]))
        fields[J] = ScalarField(omega.grid, a, gen)
    return DifferentialForm(omega.grid, k + 1, fields)


def pointwise_norm(omega: DifferentialForm) -> np.ndarray:
    acc = np.zeros(omega.grid.shape)
    for a in omega.arrays().values():
        acc += a * a
    return np.sqrt(acc)


def sup_norm_form(omega: DifferentialForm, mask: np.ndarray | None = None) -> float:
    """Max over samples of the Euclidean norm of the coefficient vector.

    For degrees n and n-1 this is the operator norm on unit tangent vectors;
    other degrees use the same Euclidean convention.
    """
    p = pointwise_norm(omega)
    if mask is not None:
        p = p[mask]
    return float(p.max()) if p.size else 0.0


def shift_samples(values: np.ndarray, offsets: Sequence[int], periodic: Sequence[bool]) -> np.ndarray:
    """``out[i] = values[i + offsets]``; zero fill off the window, wrap on periodic axes."""
    out = values
    for a, (s, per) in enumerate(zip(offsets, periodic)):
        if s == 0:
            continue
        if per:
            out = np.roll(out, -s, axis=a)
            continue
        shifted = np.zeros_like(out)
        m = out.shape[a]
        if abs(s) < m:
            src = [slice(None)] * out.ndim
            dst = [slice(None)] * out.ndim
            if s > 0:
                src[a], dst[a] = slice(s, m), slice(0, m - s)
            else:
                src[a], dst[a] = slice(0, m + s), slice(-s, m)
            shifted[tuple(dst)] = out[tuple(src)]
        out = shifted
    return out


def pullback_translation(omega: DifferentialForm, shift: Sequence[float]) -> DifferentialForm:
    """Pull back along ``x -> x + shift``: coefficients become ``c_I(x + shift)``.

    Translations have identity differential, so only arguments move.  The
    shift must be a whole number of samples unless every coefficient has a
    generator.
    """
    grid = omega.grid
    N = grid.n_per_unit
    offsets = []
    aligned = True
    for s in shift:
        t = s * N
        if abs(t - round(t)) > 1e-9:
            aligned = False
        offsets.append(int(round(t)))
    fields = {}
    for I, c in omega.coeffs.items():
        if aligned:
            gen = Shifted(c.generator, tuple(shift)) if c.generator is not None else None
            fields[I] = ScalarField(grid, shift_samples(c.values, offsets, grid.periodic), gen)
        elif c.generator is not None:
            fields[I] = ScalarField.from_generator(grid, Shifted(c.generator, tuple(shift)))
        else:
            raise ValueError("shift is not a whole number of samples and no generator is available")
    return DifferentialForm(grid, omega.degree, fields)


@dataclass(frozen=True)
class TubeEmbedding:
    """Affine embedding ``y -> A y + c`` of the unit box into a model window."""

    A: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        c = np.asarray(self.c, dtype=float).ravel()
        if A.shape != (c.size, c.size):
            raise ValueError("A must be square and match c")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)
        if abs(np.linalg.det(A)) < 1e-14:
            raise ValueError("tube map is not invertible")

    @property
    def orientation_preserving(self) -> bool:
        return bool(np.linalg.det(self.A) > 0)

    def __call__(self, y: np.ndarray) -> np.ndarray:
        return self.A @ np.asarray(y, dtype=float) + self.c

    def image_box(self) -> tuple[np.ndarray, np.ndarray]:
        corners = np.array(list(itertools.product([0.0, 1.0], repeat=self.c.size))).T
        pts = self.A @ corners + self.c[:, None]
        return pts.min(axis=1), pts.max(axis=1)

    def signed_permutation(self) -> tuple[float, list[int], list[int]] | None:
        """``(L, perm, signs)`` with ``A[perm[j], j] = signs[j] * L`` when A is a scaled signed permutation."""
        A = self.A
        n = A.shape[0]
        perm, signs, scales = [], [], []
        for j in range(n):
            nz = np.flatnonzero(np.abs(A[:, j]) > 1e-14)
            if nz.size != 1:
                return None
            perm.append(int(nz[0]))
            signs.append(1 if A[nz[0], j] > 0 else -1)
            scales.append(abs(A[nz[0], j]))
        if sorted(perm) != list(range(n)) or max(scales) - min(scales) > 1e-14 * max(scales):
            return None
        return scales[0], perm, signs


def _pullback_matrix_minors(B: np.ndarray, k: int) -> dict:
    """``dy_I = sum_J det(B[I, J]) dx_J`` for ``y = B x + const``."""
    n = B.shape[0]
    idx = multi_indices(n, k)
    out = {}
    for I in idx:
        for J in idx:
            d = 1.0 if k == 0 else float(np.linalg.det(B[np.ix_(I, J)]))
            if abs(d) > 1e-15:
                out[(I, J)] = d
    return out


def pushforward_tube(nu: DifferentialForm, theta: TubeEmbedding, target: Grid, order: int = 1) -> DifferentialForm:
    """The form on ``target`` supported in theta(Q) whose pullback along theta is ``nu``.

    Coefficients are ``(theta^-1)^* nu``: composed with the affine inverse and
    contracted with minors of the inverse Jacobian; zero outside theta(Q).
    Grid-aligned scaled signed permutations are placed sample-exactly,
    anything else is interpolated (``order`` passed to map_coordinates).
    """
    n = nu.n
    if theta.c.size != n or target.ndim != n:
        raise ValueError("dimension mismatch between form, tube and target grid")
    B = np.linalg.inv(theta.A)
    minors = _pullback_matrix_minors(B, nu.degree)
    # transformed coefficient arrays on the Q grid (still indexed by y)
    src = nu.arrays()
    q_coeffs = {J: np.zeros(nu.grid.shape) for J in multi_indices(n, nu.degree)}
    for (I, J), d in minors.items():
        q_coeffs[J] += d * src[I]

    out = {J: np.zeros(target.shape) for J in q_coeffs}
    sp = theta.signed_permutation()
    NQ = nu.grid.n_per_unit
    if sp is not None and abs(sp[0] * target.n_per_unit - NQ) < 1e-9:
        L, perm, signs = sp
        # reorder y-axes into x-axis order and flip negative ones
        inv = [perm.index(a) for a in range(n)]
        lo, _ = theta.image_box()
        start = [target.index_of(a, lo[a]) for a in range(n)]
        for J, arr in q_coeffs.items():
            a2 = np.transpose(arr, inv)
            for a in range(n):
                if signs[inv[a]] < 0:
                    a2 = np.flip(a2, axis=a)
            _place(out[J], a2, start, target.periodic)
        return DifferentialForm.from_arrays(target, nu.degree, out)

    lo, hi = theta.image_box()
    sl = []
    for a in range(n):
        i0 = max(int(np.floor((lo[a] - target.lower[a]) * target.n_per_unit)), 0)
        i1 = min(int(np.ceil((hi[a] - target.lower[a]) * target.n_per_unit)), target.counts[a] - 1)
        sl.append(np.arange(i0, i1 + 1))
    pts = np.meshgrid(*[target.lower[a] + sl[a] * target.h for a in range(n)], indexing="ij")
    X = np.stack([p.ravel() for p in pts])
    Y = B @ (X - theta.c[:, None])
    inside = np.all((Y >= -1e-12) & (Y <= 1 + 1e-12), axis=0)
    coords = Y * NQ
    for J, arr in q_coeffs.items():
        vals = ndimage.map_coordinates(arr, coords, order=order, mode="nearest")
        vals = np.where(inside, vals, 0.0).reshape(pts[0].shape)
        out[J][np.ix_(*sl)] += vals
    return DifferentialForm.from_arrays(target, nu.degree, out)


def _place(dst: np.ndarray, patch: np.ndarray, start: Sequence[int], periodic: Sequence[bool]) -> None:
    """Add ``patch`` into ``dst`` at sample offset ``start`` (wrapping periodic axes)."""
    idx = []
    for a, (s, m) in enumerate(zip(start, patch.shape)):
        r = np.arange(s, s + m)
        if periodic[a]:
            r = r % dst.shape[a]
        elif r[0] < 0 or r[-1] >= dst.shape[a]:
            raise ValueError("patch does not fit inside the window")
        idx.append(r)
    # np.add.at tolerates repeated indices when a patch wraps past a full period
    np.add.at(dst, np.ix_(*idx), patch)


def boundary_restriction(omega: DifferentialForm, normal_axis: int | None = None) -> dict[str, DifferentialForm]:
    """Pull back to the two boundary faces of a bounded axis.

    Keeps the tangential coefficients (multi-indices avoiding the normal
    axis) sampled on the faces; returns ``{"lower": ..., "upper": ...}``.
    """
    grid = omega.grid
    bounded = [a for a in range(grid.ndim) if not grid.periodic[a]]
    if normal_axis is None:
        if grid.ndim < 2:
            raise ValueError("the model has no boundary")
        normal_axis = grid.ndim - 1
    if normal_axis not in bounded:
        raise ValueError("normal axis must be a bounded axis")
    if omega.degree > grid.ndim - 1:
        raise ValueError("only forms of degree < n restrict to the boundary")
    face_grid = grid.drop_axes([normal_axis])
    out = {}
    for side, index in (("lower", 0), ("upper", grid.counts[normal_axis] - 1)):
        coeffs = {}
        for I, c in omega.coeffs.items():
            if normal_axis in I:
                continue
            J = tuple(i if i < normal_axis else i - 1 for i in I)
            coeffs[J] = ScalarField(face_grid, np.take(c.values, index, axis=normal_axis))
        out[side] = DifferentialForm(face_grid, omega.degree, coeffs)
    return out


def save_form(omega: DifferentialForm, path) -> None:
    """Flat binary (npz): JSON header plus one array per multi-index, lexicographic."""
    header = {"n": omega.n, "k": omega.degree, "window": omega.grid.to_header(), "N": omega.grid.n_per_unit}
    arrays = {"header": np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)}
    for I in sorted(omega.coeffs):
        arrays["I_" + "_".join(map(str, I))] = omega.coeffs[I].values
    np.savez(path, **arrays)


def load_form(path) -> DifferentialForm:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        grid = Grid.from_header(header["window"])
        arrays = {}
        for key in data.files:
            if key.startswith("I_"):
                rest = key[2:]
                I = tuple(int(s) for s in rest.split("_")) if rest else ()
                arrays[I] = data[key]
    return DifferentialForm.from_arrays(grid, header["k"], arrays)
