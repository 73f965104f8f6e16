"""Model geometries with a free cocompact deck action.

* line: M = R, G = Z by unit translation
* plane: M = R^2, G = Z^2
* strip: M = R x [0, 1], G = Z acting on the first coordinate (has boundary)
* circle: M = R / mZ, G = Z/m by unit rotation

Lattice models are sampled on a window of cells ``[-R, R]`` per group axis;
the circle is sampled whole on a periodic grid.  Every group element moves
samples onto samples because resolution is fixed per unit cell.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import Grid, Mollifier, Polynomial, ScalarField, Tensor, Trig, simpson_weights
from .forms import DifferentialForm, multi_indices
from .group import Cyclic, Lattice

__all__ = [
    "Model",
    "line_model",
    "plane_model",
    "strip_model",
    "circle_model",
    "model_from_name",
    "ModelForm",
    "extract_block",
    "add_block",
    "lattice_weights",
    "bump_profile",
    "cell_bump_form",
    "periodic_bump_form",
    "random_zero_class_form",
    "random_strip_form",
]


@dataclass(frozen=True)
class Model:
    name: str
    n: int
    group: Lattice | Cyclic
    group_axes: tuple[int, ...]
    cover_scale: float

    @property
    def d(self) -> int:
        return len(self.group_axes)

    @property
    def bounded_axes(self) -> tuple[int, ...]:
        return tuple(a for a in range(self.n) if a not in self.group_axes)

    @property
    def has_boundary(self) -> bool:
        return bool(self.bounded_axes)

    @property
    def finite(self) -> bool:
        return self.group.finite

    def check_resolution(self, N: int) -> None:
        # patch corners and tube ends sit on multiples of 1/16
        if N % 16 or N < 16:
            raise ValueError(f"resolution must be a positive multiple of 16, got {N}")

    def window_grid(self, N: int, R: int) -> Grid:
        lower, counts, periodic = [], [], []
        for a in range(self.n):
            if a in self.group_axes:
                if self.finite:
                    lower.append(0.0)
                    counts.append(self.group.m * N)
                    periodic.append(True)
                else:
                    lower.append(float(-R))
                    counts.append((2 * R + 1) * N + 1)
                    periodic.append(False)
            else:
                lower.append(0.0)
                counts.append(N + 1)
                periodic.append(False)
        return Grid(tuple(lower), N, tuple(counts), tuple(periodic))

    def cell_grid(self, N: int) -> Grid:
        """One fundamental cell with periodic group axes."""
        counts = tuple(N if a in self.group_axes else N + 1 for a in range(self.n))
        periodic = tuple(a in self.group_axes for a in range(self.n))
        return Grid((0.0,) * self.n, N, counts, periodic)

    def elements(self, R: int | None = None) -> list[tuple[int, ...]]:
        if self.finite:
            return list(self.group.window())
        return list(self.group.window(R))

    def translation(self, g: Sequence[int]) -> np.ndarray:
        """Vector in M by which ``g`` translates."""
        v = np.zeros(self.n)
        for a, ga in zip(self.group_axes, g):
            v[a] = ga
        return v

    def sample_of(self, grid: Grid, x: Sequence[float]) -> list[int]:
        """Sample index of the point ``x`` (which must lie on the grid)."""
        out = []
        for a in range(self.n):
            i = grid.index_of(a, x[a])
            if grid.periodic[a]:
                i %= grid.counts[a]
            out.append(i)
        return out

    def interior_mask(self, grid: Grid, R: int, depth: int) -> np.ndarray:
        """Samples whose group coordinates lie in ``[-(R - depth), R - depth + 1]``."""
        mask = np.ones(grid.shape, dtype=bool)
        if self.finite:
            return mask
        for a in self.group_axes:
            x = grid.axis_points(a)
            keep = (x >= -(R - depth) - 1e-12) & (x <= R - depth + 1 + 1e-12)
            shape = [1] * self.n
            shape[a] = -1
            mask &= keep.reshape(shape)
        return mask


def line_model(cover_scale: float = 7 / 8) -> Model:
    return Model("line", 1, Lattice(1), (0,), cover_scale)


def plane_model(cover_scale: float = 7 / 8) -> Model:
    return Model("plane", 2, Lattice(2), (0, 1), cover_scale)


def strip_model(cover_scale: float = 5 / 8) -> Model:
    return Model("strip", 2, Lattice(1), (0,), cover_scale)


def circle_model(m: int = 5, cover_scale: float = 7 / 8) -> Model:
    return Model(f"circle{m}", 1, Cyclic(m), (0,), cover_scale)


def model_from_name(name: str, m: int = 5) -> Model:
    if name == "line":
        return line_model()
    if name == "plane":
        return plane_model()
    if name == "strip":
        return strip_model()
    if name == "circle":
        return circle_model(m)
    raise ValueError(f"unknown model {name!r}; expected line, plane, strip or circle")


# ---------------------------------------------------------------------------
# block helpers on window arrays


def _block_index(shape_dst, start, size, periodic):
    idx = []
    for a, (s, m) in enumerate(zip(start, size)):
        r = np.arange(s, s + m)
        if periodic[a]:
            r = r % shape_dst[a]
        elif r[0] < 0 or r[-1] >= shape_dst[a]:
            raise ValueError(f"block [{s}, {s + m}) leaves the window along axis {a}")
        idx.append(r)
    return np.ix_(*idx)


def extract_block(values: np.ndarray, start: Sequence[int], size: Sequence[int], periodic: Sequence[bool]) -> np.ndarray:
    return values[_block_index(values.shape, start, size, periodic)]


def add_block(dst: np.ndarray, block: np.ndarray, start: Sequence[int], periodic: Sequence[bool]) -> None:
    np.add.at(dst, _block_index(dst.shape, start, block.shape, periodic), block)


def lattice_weights(model: Model, N: int, size: Sequence[int]) -> list[np.ndarray]:
    """Quadrature weights for a block whose group axes start on a cell corner.

    Group axes get the Simpson pattern ``h/3 * (2, 4, 2, 4, ...)``, which is
    periodic per cell (N even), so translating the block by a group element
    leaves the weights unchanged.  Bounded axes get composite Simpson.
    """
    h = 1.0 / N
    out = []
    for a, m in enumerate(size):
        if a in model.group_axes:
            w = np.where(np.arange(m) % 2 == 0, 2.0 * h / 3.0, 4.0 * h / 3.0)
        else:
            w = simpson_weights(m, h)
        out.append(w)
    return out


def weighted_total(block: np.ndarray, weights: Sequence[np.ndarray]) -> float:
    out = block
    for w in reversed(weights):
        out = out @ w
    return float(out)


# ---------------------------------------------------------------------------
# forms on models


@dataclass
class ModelForm:
    """A bounded form ``periodic + local`` on a model.

    ``periodic`` lives on one fundamental cell (periodic grid) and is
    repeated over M; ``local`` lives on the window and must vanish near the
    window edge.  Either part may be ``None``.
    """

    model: Model
    N: int
    R: int
    degree: int
    local: DifferentialForm | None = None
    periodic: DifferentialForm | None = None

    def __post_init__(self):
        if self.local is not None and self.local.grid != self.window_grid:
            raise ValueError("local part must live on the model window")
        if self.periodic is not None and self.periodic.grid != self.model.cell_grid(self.N):
            raise ValueError("periodic part must live on the model cell grid")

    @property
    def window_grid(self) -> Grid:
        return self.model.window_grid(self.N, self.R)

    def tiled_periodic(self) -> DifferentialForm:
        grid = self.window_grid
        if self.periodic is None:
            return DifferentialForm.zeros(grid, self.degree)
        out = {}
        for I, a in self.periodic.arrays().items():
            reps = [1] * self.model.n
            for ax in self.model.group_axes:
                reps[ax] = -(-grid.counts[ax] // self.N) + 1
            big = np.tile(a, reps)
            sl = tuple(slice(0, c) for c in grid.counts)
            out[I] = big[sl]
        return DifferentialForm.from_arrays(grid, self.degree, out)

    def materialize(self) -> DifferentialForm:
        full = self.tiled_periodic()
        if self.local is not None:
            full = full + self.local
        return full

    def __add__(self, other: "ModelForm") -> "ModelForm":
        def add(a, b):
            if a is None:
                return b
            if b is None:
                return a
            return a + b
        return ModelForm(self.model, self.N, self.R, self.degree,
                         add(self.local, other.local), add(self.periodic, other.periodic))

    def scaled(self, c: float) -> "ModelForm":
        return ModelForm(self.model, self.N, self.R, self.degree,
                         None if self.local is None else self.local * c,
                         None if self.periodic is None else self.periodic * c)


def bump_profile(lo: float, hi: float) -> Mollifier:
    return Mollifier(lo, hi)


def _bump_tensor(model: Model, cell: Sequence[int], support: Sequence[tuple[float, float]], weight: float) -> Tensor:
    profiles = []
    g = model.translation(cell)
    for a in range(model.n):
        lo, hi = support[a]
        profiles.append(Mollifier(lo + g[a], hi + g[a]))
    return Tensor(tuple(profiles), weight)


def cell_bump_form(model: Model, N: int, R: int, bumps: Sequence[tuple[Sequence[int], float]],
                   support: Sequence[tuple[float, float]] | None = None) -> ModelForm:
    """Top form ``sum weight * B(x - cell)`` with B a unit-integral tensor bump.

    ``support`` gives the bump interval per axis inside the unit cell; the
    default fills the cell.  Generators are kept for exact derivatives.
    """
    support = support or [(0.0, 1.0)] * model.n
    grid = model.window_grid(N, R)
    if not bumps:
        return ModelForm(model, N, R, model.n, DifferentialForm.zeros(grid, model.n))
    terms = []
    vals = np.zeros(grid.shape)
    for cell, w in bumps:
        cell = model.group.normalize(cell)
        if not model.finite and any(abs(c) > R - 1 for c in cell):
            raise ValueError(f"cell {cell} is not inside the window radius {R} (needs |cell| <= R - 1)")
        t = _bump_tensor(model, cell, support, w)
        if model.finite:
            # wrap the bump around the circle by evaluating on the lifted coordinate
            x = grid.axis_points(0)
            L = model.group.m
            vals += sum(t(x + k * L) for k in (-1, 0, 1))
        else:
            vals += np.broadcast_to(t(*grid.mesh()), grid.shape)
        terms.append(t)
    gen = None if model.finite else (terms[0] if len(terms) == 1 else _sum(terms))
    top = DifferentialForm.top(ScalarField(grid, vals, gen))
    return ModelForm(model, N, R, model.n, top)


def _sum(terms):
    from .fields import GeneratorSum
    return GeneratorSum(tuple(terms))


def periodic_bump_form(model: Model, N: int, R: int, weight: float = 1.0,
                       support: Sequence[tuple[float, float]] | None = None) -> ModelForm:
    """Periodic comb: the same bump of integral ``weight`` in every cell."""
    support = support or [(0.0, 1.0)] * model.n
    grid = model.cell_grid(N)
    t = Tensor(tuple(Mollifier(lo, hi) for lo, hi in support), weight)
    f = ScalarField.from_generator(grid, t)
    return ModelForm(model, N, R, model.n, None, DifferentialForm.top(f))


def random_zero_class_form(model: Model, N: int, R: int, rng: np.random.Generator,
                           n_bumps: int = 3, reach: int = 1) -> ModelForm:
    """Random finite sum of full-cell bumps whose weights sum to zero.

    On Z^d any finitely supported function has trivial class; the zero sum
    additionally makes the form solvable on finite groups.
    """
    if model.finite:
        pool = [(k,) for k in range(model.group.m)]
    else:
        pool = [tuple(int(v) for v in c) for c in np.ndindex(*(2 * reach + 1,) * model.d)]
        pool = [tuple(v - reach for v in c) for c in pool]
    if n_bumps > len(pool):
        raise ValueError("more bumps than available cells")
    # distinct cells, otherwise the zero-sum weights can cancel to roundoff
    cells = [pool[i] for i in rng.choice(len(pool), size=n_bumps, replace=False)]
    w = rng.uniform(-1.0, 1.0, size=n_bumps)
    w -= w.mean()
    return cell_bump_form(model, N, R, list(zip(cells, w)))


def random_strip_form(model: Model, N: int, R: int, rng: np.random.Generator,
                      relative: bool = False) -> ModelForm:
    """Random (n-1)-form ``a dx1 + b dx2`` on the strip: periodic trig-polynomial part plus local bumps.

    Periodic coefficients are ``cos(2 pi k x1 + phase) * p(x2)`` with
    ``deg p <= 4``; local coefficients are tensor mollifier bumps.  With
    ``relative=True`` the tangential coefficient ``a`` vanishes on both
    boundary lines.
    """
    if model.name != "strip":
        raise ValueError("random_strip_form needs the strip model")
    cg = model.cell_grid(N)
    wg = model.window_grid(N, R)

    def poly():
        c = rng.uniform(-1.0, 1.0, size=5)
        if relative:
            # multiply by x2 (1 - x2) so the value vanishes at both faces
            c = np.polynomial.polynomial.polymul(c[:3], [0.0, 1.0, -1.0])
        return Polynomial(tuple(float(v) for v in c))

    per = {}
    for I in ((0,), (1,)):
        k = int(rng.integers(1, 3))
        prof = Trig(k, float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0.2, 1.0)))
        p = poly() if I == (0,) else Polynomial(tuple(float(v) for v in rng.uniform(-1, 1, size=5)))
        c0 = float(rng.uniform(-1.0, 1.0))
        per[I] = ScalarField.from_generator(cg, _sum([Tensor((prof, p)), Tensor((None, p), c0)]))
    periodic = DifferentialForm(cg, 1, per)

    loc = {}
    for I in ((0,), (1,)):
        terms = []
        for _ in range(2):
            cell = int(rng.integers(-1, 2))
            x0 = cell + rng.uniform(0.0, 0.4)
            c = rng.uniform(-1.0, 1.0, size=3)
            if relative and I == (0,):
                c = np.polynomial.polynomial.polymul(c[:2], [0.0, 1.0, -1.0])
            q = Polynomial(tuple(float(v) for v in c))
            terms.append(Tensor((Mollifier(x0, x0 + 0.6), q), float(rng.uniform(-1, 1))))
        gen = _sum(terms)
        loc[I] = ScalarField.from_generator(wg, gen)
    local = DifferentialForm(wg, 1, loc)
    return ModelForm(model, N, R, 1, local, periodic)
