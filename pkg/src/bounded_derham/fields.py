"""Grid-sampled scalar fields on unit boxes and model windows.

Samples live on the vertices of a uniform grid with spacing ``h = 1/N`` per
unit length, so faces such as ``x_n = 0`` carry actual samples and integer
lattice shifts move samples onto samples.  Definite integrals use composite
Simpson weights; running integrals use the trapezoid rule.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from importlib import resources
from typing import Callable, Sequence

import numpy as np
from scipy import integrate as sp_integrate

__all__ = [
    "Grid",
    "ScalarField",
    "Profile",
    "Mollifier",
    "SmoothStep",
    "Trig",
    "Polynomial",
    "Tensor",
    "GeneratorSum",
    "Shifted",
    "simpson_weights",
    "integrate",
    "cumulative_integral",
    "trailing_integral",
    "partial_derivative",
    "mollifier_1d",
    "sup_norm",
    "mollifier_constants",
    "scan_mollifier_constants",
    "save_field",
    "load_field",
]

MIN_RESOLUTION = 8


@dataclass(frozen=True)
class Grid:
    """Uniform vertex grid.

    ``lower[a] + i * h`` for ``i in range(counts[a])`` are the sample
    coordinates along axis ``a``.  A periodic axis has period
    ``counts[a] * h`` and does not repeat its first sample at the end.
    """

    lower: tuple[float, ...]
    n_per_unit: int
    counts: tuple[int, ...]
    periodic: tuple[bool, ...] = ()

    def __post_init__(self):
        if not self.periodic:
            object.__setattr__(self, "periodic", (False,) * len(self.counts))
        if len(self.lower) != len(self.counts) or len(self.periodic) != len(self.counts):
            raise ValueError("lower, counts and periodic must have one entry per axis")
        if self.n_per_unit < MIN_RESOLUTION or self.n_per_unit % 2:
            raise ValueError(f"resolution must be an even integer >= {MIN_RESOLUTION}, got {self.n_per_unit}")
        if any(c < 2 for c in self.counts):
            raise ValueError("every axis needs at least two samples")

    @classmethod
    def box(cls, n: int, N: int) -> "Grid":
        """Grid on the closed unit box [0, 1]^n with N intervals per axis."""
        return cls((0.0,) * n, N, (N + 1,) * n)

    @property
    def ndim(self) -> int:
        return len(self.counts)

    @property
    def h(self) -> float:
        return 1.0 / self.n_per_unit

    @property
    def shape(self) -> tuple[int, ...]:
        return self.counts

    def axis_points(self, axis: int) -> np.ndarray:
        return self.lower[axis] + np.arange(self.counts[axis]) * self.h

    def extent(self, axis: int) -> tuple[float, float]:
        n = self.counts[axis] if self.periodic[axis] else self.counts[axis] - 1
        return self.lower[axis], self.lower[axis] + n * self.h

    def mesh(self) -> list[np.ndarray]:
        return np.meshgrid(*[self.axis_points(a) for a in range(self.ndim)], indexing="ij", sparse=True)

    def index_of(self, axis: int, x: float) -> int:
        t = (x - self.lower[axis]) * self.n_per_unit
        i = round(t)
        if abs(t - i) > 1e-9:
            raise ValueError(f"coordinate {x} is not on the grid along axis {axis}")
        return int(i)

    def drop_axes(self, axes: Sequence[int]) -> "Grid":
        keep = [a for a in range(self.ndim) if a not in set(axes)]
        return _grid_from_axes(self, keep)

    def to_header(self) -> dict:
        return {
            "lower": list(self.lower),
            "N": self.n_per_unit,
            "counts": list(self.counts),
            "periodic": list(self.periodic),
        }

    @classmethod
    def from_header(cls, d: dict) -> "Grid":
        return cls(tuple(float(v) for v in d["lower"]), int(d["N"]),
                   tuple(int(v) for v in d["counts"]), tuple(bool(v) for v in d["periodic"]))


def _grid_from_axes(grid: Grid, axes: Sequence[int]) -> Grid:
    # Zero-axis grids are allowed here (scalars after integrating every axis out).
    g = object.__new__(Grid)
    object.__setattr__(g, "lower", tuple(grid.lower[a] for a in axes))
    object.__setattr__(g, "n_per_unit", grid.n_per_unit)
    object.__setattr__(g, "counts", tuple(grid.counts[a] for a in axes))
    object.__setattr__(g, "periodic", tuple(grid.periodic[a] for a in axes))
    return g


# ---------------------------------------------------------------------------
# analytic generators


class Profile:
    """A one-dimensional analytic function with closed-form derivatives."""

    order = 0

    def __call__(self, t):
        raise NotImplementedError

    def derivative(self) -> "Profile":
        raise NotImplementedError


@lru_cache(maxsize=None)
def _mollifier_log_norm(length: float) -> float:
    # log c with c^-1 = integral of exp(-1/((t-a)(b-t))) over (a, b); the peak
    # value exp(-4/L^2) is factored out so narrow supports do not underflow
    L2 = length * length

    def shape(u):
        if not 0 < u < 1:
            return 0.0
        return math.exp(-((1.0 - 2.0 * u) ** 2) / (L2 * u * (1.0 - u)))

    val, _ = sp_integrate.quad(shape, 0.0, 1.0, points=[0.5], epsabs=0.0, epsrel=1e-13, limit=200)
    return 4.0 / L2 - math.log(length * val)


@dataclass(frozen=True)
class Mollifier(Profile):
    """``c * exp(-1/((t-a)(b-t)))`` on (a, b), zero outside, unit integral."""

    a: float
    b: float
    order: int = 0

    def __post_init__(self):
        if not self.b > self.a:
            raise ValueError(f"degenerate mollifier support ({self.a}, {self.b})")
        if self.order > 2:
            raise ValueError("mollifier derivatives are implemented up to order 2")

    @property
    def log_c(self) -> float:
        return _mollifier_log_norm(self.b - self.a)

    @property
    def c(self) -> float:
        return math.exp(self.log_c)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t > self.a) & (t < self.b)
        ts = np.where(inside, t, 0.5 * (self.a + self.b))
        q = (ts - self.a) * (self.b - ts)
        base = np.exp(self.log_c - 1.0 / q)
        if self.order == 0:
            out = base
        else:
            dq = self.a + self.b - 2.0 * ts
            if self.order == 1:
                out = base * dq / q**2
            else:
                out = base * (dq**2 - 2.0 * q**2 - 2.0 * q * dq**2) / q**4
        return np.where(inside, out, 0.0)

    def derivative(self) -> "Mollifier":
        return Mollifier(self.a, self.b, self.order + 1)

    @property
    def sup_norm(self) -> float:
        """Exact sup of the undifferentiated mollifier (attained at the midpoint)."""
        L = self.b - self.a
        return math.exp(self.log_c - 4.0 / (L * L))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(96)


@dataclass(frozen=True)
class SmoothStep(Profile):
    """Running integral of a mollifier: 0 below ``a``, 1 above ``b``."""

    a: float
    b: float
    order: int = 0

    def __call__(self, t):
        if self.order > 0:
            return Mollifier(self.a, self.b, self.order - 1)(t)
        t = np.asarray(t, dtype=float)
        flat = t.ravel()
        out = np.where(flat >= self.b, 1.0, 0.0)
        mid = (flat > self.a) & (flat < self.b)
        if mid.any():
            hi = flat[mid]
            # Gauss-Legendre on [a, hi]; the integrand is smooth there
            half = 0.5 * (hi - self.a)
            nodes = self.a + half[:, None] * (_GL_NODES[None, :] + 1.0)
            vals = Mollifier(self.a, self.b)(nodes)
            out[mid] = np.clip((vals * _GL_WEIGHTS[None, :]).sum(axis=1) * half, 0.0, 1.0)
        return out.reshape(t.shape)

    def derivative(self) -> "SmoothStep":
        return SmoothStep(self.a, self.b, self.order + 1)


@dataclass(frozen=True)
class Trig(Profile):
    """``amplitude * cos(2*pi*freq*t + phase)`` and its derivatives."""

    freq: int
    phase: float = 0.0
    amplitude: float = 1.0
    order: int = 0

    def __call__(self, t):
        w = 2.0 * math.pi * self.freq
        return self.amplitude * w**self.order * np.cos(w * np.asarray(t, dtype=float) + self.phase + self.order * math.pi / 2)

    def derivative(self) -> "Trig":
        return Trig(self.freq, self.phase, self.amplitude, self.order + 1)


@dataclass(frozen=True)
class Polynomial(Profile):
    coeffs: tuple[float, ...]

    def __call__(self, t):
        return np.polynomial.polynomial.polyval(np.asarray(t, dtype=float), self.coeffs)

    def derivative(self) -> "Polynomial":
        d = np.polynomial.polynomial.polyder(self.coeffs) if len(self.coeffs) > 1 else [0.0]
        return Polynomial(tuple(float(c) for c in d))


@dataclass(frozen=True)
class Tensor:
    """Separable generator ``scale * prod_a profiles[a](x_a)``; ``None`` factors are 1."""

    profiles: tuple[Profile | None, ...]
    scale: float = 1.0

    def __call__(self, *coords):
        out = self.scale
        for p, x in zip(self.profiles, coords):
            if p is not None:
                out = out * p(x)
        return out

    def derivative(self, axis: int) -> "Tensor":
        p = self.profiles[axis]
        if p is None:
            return Tensor(self.profiles, 0.0)
        profiles = list(self.profiles)
        profiles[axis] = p.derivative()
        return Tensor(tuple(profiles), self.scale)

    def scaled(self, c: float) -> "Tensor":
        return Tensor(self.profiles, self.scale * c)


@dataclass(frozen=True)
class GeneratorSum:
    terms: tuple

    def __call__(self, *coords):
        out = 0.0
        for t in self.terms:
            out = out + t(*coords)
        return out

    def derivative(self, axis: int) -> "GeneratorSum":
        return GeneratorSum(tuple(t.derivative(axis) for t in self.terms))

    def scaled(self, c: float) -> "GeneratorSum":
        return GeneratorSum(tuple(t.scaled(c) for t in self.terms))


@dataclass(frozen=True)
class Shifted:
    """``x -> base(x + offset)``."""

    base: object
    offset: tuple[float, ...]

    def __call__(self, *coords):
        return self.base(*[x + o for x, o in zip(coords, self.offset)])

    def derivative(self, axis: int) -> "Shifted":
        return Shifted(self.base.derivative(axis), self.offset)

    def scaled(self, c: float) -> "Shifted":
        return Shifted(self.base.scaled(c), self.offset)


def _add_generators(a, b):
    if a is None or b is None:
        return None
    ta = a.terms if isinstance(a, GeneratorSum) else (a,)
    tb = b.terms if isinstance(b, GeneratorSum) else (b,)
    return GeneratorSum(ta + tb)


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray
    generator: Callable | None = dc_field(default=None, repr=False)

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"values shape {vals.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("field samples must be finite")
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_generator(cls, grid: Grid, generator) -> "ScalarField":
        vals = np.broadcast_to(generator(*grid.mesh()), grid.shape)
        return cls(grid, np.array(vals, dtype=float), generator)

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarField":
        return cls(grid, np.zeros(grid.shape))

    @property
    def extension(self) -> str:
        return "periodic" if any(self.grid.periodic) else "zero"

    def resample(self, grid: Grid) -> "ScalarField":
        if self.generator is None:
            raise ValueError("exact resampling needs an analytic generator")
        return ScalarField.from_generator(grid, self.generator)

    def margin_is_zero(self, width: int = 1, axes: Sequence[int] | None = None) -> bool:
        """True when the outer ``width`` sample layers along ``axes`` are exactly zero."""
        axes = range(self.grid.ndim) if axes is None else axes
        v = self.values
        for a in axes:
            if self.grid.periodic[a]:
                continue
            lo = np.take(v, range(width), axis=a)
            hi = np.take(v, range(v.shape[a] - width, v.shape[a]), axis=a)
            if np.any(lo != 0.0) or np.any(hi != 0.0):
                return False
        return True

    def __add__(self, other: "ScalarField") -> "ScalarField":
        _check_same_grid(self, other)
        return ScalarField(self.grid, self.values + other.values, _add_generators(self.generator, other.generator))

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return self + other * -1.0

    def __mul__(self, c: float) -> "ScalarField":
        gen = self.generator.scaled(c) if hasattr(self.generator, "scaled") else None
        return ScalarField(self.grid, self.values * c, gen)

    __rmul__ = __mul__

    def __neg__(self) -> "ScalarField":
        return self * -1.0


def _check_same_grid(a: ScalarField, b: ScalarField) -> None:
    if a.grid != b.grid:
        raise ValueError("fields live on different grids")


def simpson_weights(count: int, h: float, periodic: bool = False) -> np.ndarray:
    """Composite Simpson weights for ``count`` equispaced samples.

    An odd number of intervals closes with a Simpson 3/8 panel; a periodic
    axis uses the (spectrally accurate) uniform rule.
    """
    if periodic:
        return np.full(count, h)
    m = count - 1
    if m < 1:
        raise ValueError("need at least one interval")
    w = np.zeros(count)
    if m == 1:
        w[:] = h / 2
        return w
    even = m if m % 2 == 0 else m - 3
    if even > 0:
        w[0:even + 1:2] += 2.0 * h / 3
        w[1:even:2] += 4.0 * h / 3
        w[0] -= h / 3
        w[even] -= h / 3
    if m % 2 == 1:
        w[even:even + 4] += 3.0 * h / 8 * np.array([1.0, 3.0, 3.0, 1.0])
    return w


def _weighted_sum(values: np.ndarray, weights: Sequence[np.ndarray]) -> float:
    out = values
    for w in reversed(weights):
        out = out @ w
    return float(out)


def integrate(field: ScalarField, region: Sequence[tuple[float, float]] | None = None) -> float:
    """Composite Simpson integral of ``field`` over an axis-aligned sub-box.

    Parts of ``region`` outside a zero-extended window contribute zero.
    Region corners must sit on grid points.
    """
    grid = field.grid
    if grid.ndim == 0:
        return float(field.values)
    if region is None:
        ws = [simpson_weights(grid.counts[a], grid.h, grid.periodic[a]) for a in range(grid.ndim)]
        return _weighted_sum(field.values, ws)
    if len(region) != grid.ndim:
        raise ValueError("region needs one interval per axis")
    slices, ws = [], []
    for a, (lo, hi) in enumerate(region):
        if not hi > lo:
            raise ValueError(f"empty integration region along axis {a}")
        i0, i1 = grid.index_of(a, lo), grid.index_of(a, hi)
        if grid.periodic[a]:
            idx = np.arange(i0, i1 + 1) % grid.counts[a]
            if i1 - i0 >= grid.counts[a]:
                raise ValueError("region longer than one period")
        else:
            i0, i1 = max(i0, 0), min(i1, grid.counts[a] - 1)
            if i1 <= i0:
                return 0.0
            idx = np.arange(i0, i1 + 1)
        slices.append(idx)
        ws.append(simpson_weights(len(idx), grid.h))
    sub = field.values[np.ix_(*slices)]
    return _weighted_sum(sub, ws)


def cumulative_integral(field: ScalarField, axis: int) -> ScalarField:
    """Running trapezoid integral from the lower end of ``axis``; starts at exactly 0."""
    grid = field.grid
    if grid.periodic[axis]:
        raise ValueError("running integrals need a non-periodic axis")
    v = np.moveaxis(field.values, axis, 0)
    out = np.zeros_like(v)
    out[1:] = np.cumsum(0.5 * (v[:-1] + v[1:]), axis=0) * grid.h
    return ScalarField(grid, np.moveaxis(out, 0, axis))


def trailing_integral(field: ScalarField, first_axis: int) -> ScalarField:
    """Integrate out axes ``first_axis..n`` (1-based) with the trapezoid rule.

    The result lives on the first ``first_axis - 1`` axes; with
    ``first_axis = 1`` it is a zero-dimensional field holding the total.
    """
    n = field.grid.ndim
    if not 1 <= first_axis <= n:
        raise ValueError(f"first_axis must be in 1..{n}, got {first_axis}")
    v = field.values
    for a in range(n - 1, first_axis - 2, -1):
        if field.grid.periodic[a]:
            v = v.sum(axis=a) * field.grid.h
        else:
            v = np.trapezoid(v, dx=field.grid.h, axis=a)
    grid = _grid_from_axes(field.grid, range(first_axis - 1))
    return ScalarField(grid, np.asarray(v))


def partial_derivative(field: ScalarField, axis: int, exact: bool = False) -> ScalarField:
    """Second-order centred differences (one-sided at window edges).

    With ``exact=True`` the analytic generator's derivative is sampled instead.
    """
    grid = field.grid
    if exact:
        if field.generator is None:
            raise ValueError("exact derivative needs an analytic generator")
        return ScalarField.from_generator(grid, field.generator.derivative(axis))
    v = field.values
    if grid.periodic[axis]:
        d = (np.roll(v, -1, axis=axis) - np.roll(v, 1, axis=axis)) / (2.0 * grid.h)
    else:
        d = np.gradient(v, grid.h, axis=axis, edge_order=2)
    return ScalarField(grid, d)


def mollifier_1d(a: float, b: float, N: int = 128) -> ScalarField:
    """Unit-integral mollifier on (a, b) sampled on [0, 1] with its generator attached."""
    prof = Mollifier(a, b)
    return ScalarField.from_generator(Grid.box(1, N), Tensor((prof,)))


def sup_norm(field: ScalarField) -> float:
    """Maximum of |samples|: a grid approximation of the true supremum."""
    if field.values.size == 0:
        return 0.0
    return float(np.max(np.abs(field.values)))


# ---------------------------------------------------------------------------
# cached mollifier constants

DEFAULT_SUPPORTS = ((0.0, 1.0), (0.1, 0.9))


def scan_mollifier_constants(supports=DEFAULT_SUPPORTS, samples: int = 100_000) -> dict:
    """Dense sample scan of mollifier sup norms (value and first derivative)."""
    out = {}
    for a, b in supports:
        t = np.linspace(a, b, samples + 1)
        m = Mollifier(a, b)
        out[f"{a:g},{b:g}"] = {
            "sup": float(np.max(m(t))),
            "sup_derivative": float(np.max(np.abs(m.derivative()(t)))),
            "samples": samples,
        }
    return out


@lru_cache(maxsize=1)
def mollifier_constants() -> dict:
    text = resources.files("bounded_derham").joinpath("data/mollifier_constants.json").read_text()
    return json.loads(text)


def mollifier_sup(a: float, b: float) -> float:
    """Cached sup norm of the mollifier on (a, b) when recorded, else the closed form."""
    rec = mollifier_constants().get(f"{a:g},{b:g}")
    if rec is not None:
        return rec["sup"]
    return Mollifier(a, b).sup_norm


# ---------------------------------------------------------------------------
# serialization


def save_field(field: ScalarField, path) -> None:
    """CSV layout: three ``#`` header lines then row-major samples, one per line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# box {json.dumps({'lower': list(field.grid.lower), 'counts': list(field.grid.counts)})}\n")
        fh.write(f"# N {field.grid.n_per_unit}\n")
        fh.write(f"# extension {json.dumps({'mode': field.extension, 'periodic': list(field.grid.periodic)})}\n")
        w = csv.writer(fh)
        for v in field.values.ravel(order="C"):
            w.writerow([repr(float(v))])


def load_field(path) -> ScalarField:
    with open(path) as fh:
        box = json.loads(fh.readline().split(" ", 2)[2])
        N = int(fh.readline().split()[2])
        ext = json.loads(fh.readline().split(" ", 2)[2])
        vals = np.array([float(row[0]) for row in csv.reader(fh) if row])
    grid = Grid(tuple(box["lower"]), N, tuple(box["counts"]), tuple(ext["periodic"]))
    return ScalarField(grid, vals.reshape(grid.shape))
