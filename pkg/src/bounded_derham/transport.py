"""Covers, tube transports and the primitive pipeline for zero-class forms.

Pipeline for a top form ``omega`` whose class vanishes:

1. ``normalize_global`` subtracts tube forms so that ``int^phi omega'`` is
   zero at every interior group element (a certificate tells how much mass
   to move between translates of a fundamental region);
2. ``normalize_local`` moves mass between the patches at each group element
   along a fixed spanning tree so that every ``int phi_i g^* omega''`` is 0;
3. ``global_primitive`` solves each ``phi_i g^* omega''`` on its box chart
   and adds the translated primitives.

All tubes are affine and axis aligned with side 3/4, so transports move
mass by half a cell; a unit step is a chain of two such tubes.
"""
from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fields import Grid, Mollifier, SmoothStep
from .forms import DifferentialForm, TubeEmbedding, exterior_derivative, pushforward_tube, sup_norm_form
from .group import CoinvariantCertificate, EllInftyFn, act, check_certificate
from .integration import PartitionFunction, integrate_phi, phi_values
from .models import Model, ModelForm, add_block, extract_block
from .poincare import kn_constant, primitive_box, primitive_halfbox

__all__ = [
    "AxisPiece",
    "Patch",
    "CoverData",
    "build_cover",
    "TransportPair",
    "make_transport",
    "StageError",
    "normalize_global",
    "normalize_local",
    "global_primitive",
    "SolveReport",
    "solve_primitive",
    "surjectivity_witness",
]

TUBE_SIDE = 0.75
STEP = 0.5
BUMP_HALF = 0.125
GRID_QUANTUM = 1.0 / 16.0
VERTICAL_TRANSITION = (0.5, 7.0 / 12.0)


class StageError(RuntimeError):
    """Failure inside one pipeline stage; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get("BOUNDED_DERHAM_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# cover


def _inner(a: float, b: float) -> SmoothStep:
    # transition strictly inside (a, b) so the partition maps vanish on a band near patch edges
    d = (b - a) / 8.0
    return SmoothStep(a + d, b - d)


@dataclass(frozen=True)
class AxisPiece:
    """One axis of a patch: lift interval, chart orientation and partition factor."""

    lo: float
    flip: bool
    rises: tuple  # SmoothSteps added
    falls: tuple  # SmoothSteps subtracted
    constant: float
    plateau: tuple[float, float]
    core: tuple[float, float]

    def __call__(self, x):
        out = self.constant + 0.0 * np.asarray(x, dtype=float)
        for s in self.rises:
            out = out + s(x)
        for s in self.falls:
            out = out - s(x)
        return out


@dataclass(frozen=True)
class Patch:
    index: int
    axes: tuple[AxisPiece, ...]
    scale: float
    halfbox: bool

    @property
    def lower(self) -> tuple[float, ...]:
        return tuple(p.lo for p in self.axes)

    @property
    def signs(self) -> tuple[int, ...]:
        return tuple(-1 if p.flip else 1 for p in self.axes)

    def lifted(self, *coords):
        """``phi_i`` on M near cell 0: product of the axis factors."""
        out = 1.0
        for p, x in zip(self.axes, coords):
            out = out * p(x)
        return out

    def plateau_center(self, axis: int) -> float:
        lo, hi = self.axes[axis].plateau
        return _quantize(0.5 * (lo + hi))


def _quantize(x: float) -> float:
    return round(x / GRID_QUANTUM) * GRID_QUANTUM


def _group_axis_pieces(s: float) -> tuple[AxisPiece, AxisPiece]:
    tb = (max(0.0, 2 * s / 3 - 0.5), min(s / 3, s - 0.5))
    ta = (max(2 * s / 3, 0.5), min(0.5 + s / 3, s))
    if not (tb[1] > tb[0] and ta[1] > ta[0]):
        raise ValueError(f"cover scale {s} leaves no room for the partition transitions")
    sb, sa, sb1 = _inner(*tb), _inner(*ta), _inner(tb[0] + 1, tb[1] + 1)
    p0 = AxisPiece(0.0, False, (sb,), (sa,), 0.0, (sb.b, sa.a), (s / 3, 2 * s / 3))
    p1 = AxisPiece(0.5, False, (sa,), (sb1,), 0.0, (sa.b, sb1.a), (0.5 + s / 3, 0.5 + 2 * s / 3))
    return p0, p1


def _bounded_axis_pieces(s: float) -> tuple[AxisPiece, AxisPiece]:
    st = _inner(*VERTICAL_TRANSITION)
    bottom = AxisPiece(0.0, False, (), (st,), 1.0, (0.0, st.a), (s / 3, 2 * s / 3))
    top = AxisPiece(1.0 - s, True, (st,), (), 0.0, (st.b, 1.0), (1 - 2 * s / 3, 1 - s / 3))
    return bottom, top


@dataclass
class CoverData:
    """Patches, cores, plateaus and partition maps for a model quotient."""

    model: Model
    scale: float
    patches: tuple[Patch, ...]
    tree: tuple[tuple[int, int], ...]  # (child, parent), BFS order from patch 0
    plateau: tuple[tuple[float, float], ...]  # where phi == 1, per group axis

    def global_center(self) -> np.ndarray:
        c = np.zeros(self.model.n)
        for k, a in enumerate(self.model.group_axes):
            c[a] = _quantize(0.5 * sum(self.plateau[k]))
        for a in self.model.bounded_axes:
            c[a] = 0.5
        return c

    def check(self) -> dict:
        """Assert the cover invariants on a fine sample of one cell; returns measured values."""
        t = np.linspace(0.0, 1.0, 1001)[:-1]
        s = self.scale
        if not s < 1.0:
            raise AssertionError("patches must have diameter < 1 to trivialise the covering")
        report = {}
        # partition of unity on the quotient, per axis
        worst = 0.0
        for k in range(self.model.n):
            pieces = {_lift_key(p.axes[k]): p.axes[k] for p in self.patches}.values()
            total = np.zeros_like(t)
            if k in self.model.group_axes:
                for p in pieces:
                    total += sum(p(t + j) for j in (-1, 0, 1))
            else:
                for p in pieces:
                    total += p(t)
            worst = max(worst, float(np.max(np.abs(total - 1.0))))
        report["partition_sum_error"] = worst
        if worst > 1e-12:
            raise AssertionError(f"partition maps do not sum to 1 (error {worst:.2e})")
        # cores inside plateaus, cores pairwise disjoint
        for p in self.patches:
            for ax in p.axes:
                if not (ax.plateau[0] <= ax.core[0] and ax.core[1] <= ax.plateau[1]):
                    raise AssertionError(f"patch {p.index}: partition map is not 1 on its core")
        for i, p in enumerate(self.patches):
            for q in self.patches[i + 1:]:
                if not _cores_disjoint(self.model, p, q):
                    raise AssertionError(f"cores of patches {p.index} and {q.index} overlap")
        report["patches"] = len(self.patches)
        return report


def _cores_disjoint(model: Model, p: Patch, q: Patch) -> bool:
    for k in range(model.n):
        a, b = p.axes[k].core, q.axes[k].core
        shifts = (-1, 0, 1) if k in model.group_axes else (0,)
        if all(a[1] <= b[0] + j or b[1] + j <= a[0] for j in shifts):
            return True
    return False


def _lift_key(a: AxisPiece) -> tuple:
    return (a.lo, a.rises, a.falls, a.constant)


def _same_lift(a: AxisPiece, b: AxisPiece) -> bool:
    # chart orientation does not matter for adjacency
    return _lift_key(a) == _lift_key(b)


def _bfs_tree(patches: Sequence[Patch]) -> tuple[tuple[int, int], ...]:
    def adjacent(p, q):
        return sum(1 for a, b in zip(p.axes, q.axes) if not _same_lift(a, b)) == 1

    seen = {0}
    order = []
    queue = deque([0])
    while queue:
        v = queue.popleft()
        for w in range(len(patches)):
            if w not in seen and adjacent(patches[v], patches[w]):
                seen.add(w)
                order.append((w, v))
                queue.append(w)
    if len(seen) != len(patches):
        raise ValueError("patch adjacency graph is disconnected")
    return tuple(order)


def build_cover(model: Model) -> CoverData:
    """``2^d`` affine patches per group axis pair {0, 1/2}, times bottom/top bands on the strip."""
    if model.n > 3:
        raise ValueError("covers are only built for models of dimension <= 3")
    s = model.cover_scale
    per_axis = []
    for a in range(model.n):
        per_axis.append(_group_axis_pieces(s) if a in model.group_axes else _bounded_axis_pieces(s))
    patches = []
    for i, combo in enumerate(np.ndindex(*(2,) * model.n)):
        axes = tuple(per_axis[a][c] for a, c in enumerate(combo))
        if sum(p.flip for p in axes) % 2:
            # keep the chart orientation preserving: flip a group axis as well
            axes = tuple(
                AxisPiece(p.lo, not p.flip, p.rises, p.falls, p.constant, p.plateau, p.core)
                if a in model.group_axes and a == model.group_axes[0] else p
                for a, p in enumerate(axes)
            )
        patches.append(Patch(i, axes, s, model.has_boundary))
    plateau = []
    for a in model.group_axes:
        p0, p1 = per_axis[a]
        plateau.append((p0.plateau[0], p1.plateau[1]))
    cover = CoverData(model, s, tuple(patches), _bfs_tree(patches), tuple(plateau))
    return cover


# ---------------------------------------------------------------------------
# tubes


def _parity_weights(lower: float, count: int, N: int, bounded: bool) -> np.ndarray:
    # Simpson weights indexed by the global sample parity (cells start on even samples)
    h = 1.0 / N
    idx = np.rint(lower * N).astype(int) + np.arange(count)
    w = np.where(idx % 2 == 0, 2.0 * h / 3.0, 4.0 * h / 3.0)
    if bounded:
        w = np.where(idx == 0, h / 3.0, w)
        w = np.where(idx == N, h / 3.0, w)
    return w


@dataclass
class TransportPair:
    """Tube forms on a local block of M: ``rho`` (top) and ``nu`` with ``d nu = rho``.

    ``anchor`` is the M coordinate of the block's lower corner for the copy
    attached to the identity element.
    """

    model: Model
    N: int
    rho: DifferentialForm
    nu: DifferentialForm
    anchor: np.ndarray
    thetas: tuple[TubeEmbedding, ...]
    lower_integral: float
    upper_integral: float
    central_max: float
    residual: float

    @property
    def nu_norm(self) -> float:
        return sup_norm_form(self.nu)

    def place(self, rho_dst: np.ndarray | None, nu_dst: dict | None, coeff: float, g: Sequence[int],
              grid: Grid) -> None:
        """Add ``coeff`` times the copy translated by ``g`` into window arrays."""
        x = self.anchor + self.model.translation(g)
        start = self.model.sample_of(grid, x)
        if rho_dst is not None:
            add_block(rho_dst, coeff * self.rho.top_coefficient, start, grid.periodic)
        if nu_dst is not None:
            for I, arr in self.nu.arrays().items():
                if np.any(arr):
                    add_block(nu_dst[I], coeff * arr, start, grid.periodic)


def _tube_frame(direction: np.ndarray) -> np.ndarray:
    """Orthonormal matrix whose last column is ``direction`` and whose determinant is +1."""
    n = direction.size
    v = direction / np.linalg.norm(direction)
    if n == 1:
        if v[0] < 0:
            raise ValueError("a one-dimensional orientation-preserving tube must point in +x; negate the +x tube instead")
        return np.ones((1, 1))
    if np.count_nonzero(np.abs(v) > 1e-14) == 1:
        a = int(np.flatnonzero(np.abs(v) > 1e-14)[0])
        others = [b for b in range(n) if b != a]
        F = np.zeros((n, n))
        for j, b in enumerate(others):
            F[b, j] = 1.0
        F[a, n - 1] = np.sign(v[a])
    else:
        basis = [v] + [np.eye(n)[b] for b in range(n)]
        q, _ = np.linalg.qr(np.array(basis[: n]).T)
        F = np.zeros((n, n))
        F[:, n - 1] = v
        k = 0
        for j in range(1, n):
            F[:, k] = q[:, j]
            k += 1
    if np.linalg.det(F) < 0:
        F[:, 0] = -F[:, 0]
    return F


def make_transport(model: Model, N: int, source: Sequence[float], target: Sequence[float],
                   box_center: Sequence[float] | None = None, bump_half: float = BUMP_HALF,
                   window: Grid | None = None) -> TransportPair:
    """Tube pair moving unit mass from a bump at ``source`` to a bump at ``target``.

    The tube is ``theta(y) = A y + c`` with ``A = L * F``, ``F`` orthonormal of
    determinant +1, ``L = 1.5 |target - source|``; its lower third is
    centred on ``source`` and its upper third on ``target``.  ``box_center``
    moves the lateral centre of the tube (the bump stays at ``source``).
    ``rho`` is (bump(upper) - bump(lower)) times a lateral bump, normalised
    to integral 1 on the upper part; ``nu`` comes from the box primitive.
    """
    source = np.asarray(source, dtype=float)
    target = np.asarray(target, dtype=float)
    n = model.n
    v = target - source
    dist = float(np.linalg.norm(v))
    if dist < 1e-12:
        raise ValueError("degenerate transport: source and target coincide")
    L = 1.5 * dist
    F = _tube_frame(v)
    A = L * F
    center = source + v / 2 if box_center is None else np.asarray(box_center, dtype=float)
    # y = 1/2 on the lateral axes and y_n = 1/2 at the midpoint of the segment
    lateral_shift = F[:, : n - 1] @ (F[:, : n - 1].T @ (center - (source + v / 2)))
    c = source + v / 2 + lateral_shift - A @ np.full(n, 0.5)
    theta = TubeEmbedding(A, c)
    lo, hi = theta.image_box()
    for a in model.bounded_axes:
        if lo[a] <= 1e-12 or hi[a] >= 1 - 1e-12:
            raise ValueError("tube touches the boundary of the strip")
    if window is not None:
        for a in range(n):
            if not window.periodic[a]:
                wlo, whi = window.extent(a)
                if lo[a] < wlo - 1e-12 or hi[a] > whi + 1e-12:
                    raise ValueError("tube leaves the window")

    aligned = theta.signed_permutation() is not None and abs(L * N - round(L * N)) < 1e-9
    NQ = int(round(L * N)) if aligned else 2 * int(np.ceil(L * N / 2)) + 2
    if NQ % 2:
        NQ += 1
        aligned = False
    qgrid = Grid.box(n, NQ)
    y = np.arange(NQ + 1) / NQ
    low = Mollifier(0.0, 1.0 / 3.0)(y)
    shift = 2 * NQ / 3
    if abs(shift - round(shift)) < 1e-9:
        up = np.zeros_like(low)
        k = int(round(shift))
        up[k:] = low[: NQ + 1 - k]
    else:
        up = Mollifier(2.0 / 3.0, 1.0)(y)
    prof = up - low
    y_bump = np.linalg.solve(A, source - c)  # bump centre in tube coordinates
    factors = []
    for j in range(n - 1):
        hw = bump_half / L
        if y_bump[j] - hw < 0 or y_bump[j] + hw > 1:
            raise ValueError("lateral bump does not fit inside the tube")
        factors.append(Mollifier(y_bump[j] - hw, y_bump[j] + hw)(y))
    factors.append(prof)
    rq = np.ones(())
    for f in factors:
        rq = np.multiply.outer(rq, f)
    rho_q = DifferentialForm.from_arrays(qgrid, n, {tuple(range(n)): rq})
    nu_q = primitive_box(rho_q, tol=1e-12 * float(np.max(np.abs(rq))), verify=False).eta

    if aligned:
        lo_s = np.array([np.floor(lo[a] * N + 0.5) / N for a in range(n)])
        block = Grid(tuple(lo_s), N, (NQ + 1,) * n)
    else:
        lo_s = np.floor(lo * N) / N
        hi_s = np.ceil(hi * N) / N
        counts = tuple(int(round((hi_s[a] - lo_s[a]) * N)) + 1 for a in range(n))
        block = Grid(tuple(lo_s), N, counts)
    rho_m = pushforward_tube(rho_q, theta, block, order=3)
    nu_m = pushforward_tube(nu_q, theta, block, order=3)

    # split the block into parts by the tube coordinate y_n
    mesh = block.mesh()
    X = np.stack(np.broadcast_arrays(*mesh))
    Y = np.tensordot(np.linalg.inv(A), X - c.reshape((n,) + (1,) * n), axes=1)
    yn = Y[n - 1]
    weights = [_parity_weights(block.lower[a], block.counts[a], N, a in model.bounded_axes) for a in range(n)]
    wfull = np.ones(())
    for w in weights:
        wfull = np.multiply.outer(wfull, w)
    r = rho_m.top_coefficient
    upper = float(np.sum(wfull * r * (yn > 0.5)))
    if not upper > 0:
        raise ValueError("tube upper part carries no mass at this resolution")
    rho_m = rho_m * (1.0 / upper)
    nu_m = nu_m * (1.0 / upper)
    r = rho_m.top_coefficient
    lower_int = float(np.sum(wfull * r * (yn < 0.5)))
    upper_int = float(np.sum(wfull * r * (yn > 0.5)))
    central = float(np.max(np.abs(r[(yn > 1 / 3 + 1e-9) & (yn < 2 / 3 - 1e-9)]), initial=0.0))
    res = float(np.max(np.abs(exterior_derivative(nu_m).top_coefficient - r)))
    return TransportPair(model, N, rho_m, nu_m, np.array(block.lower), (theta,), lower_int, upper_int,
                         central, res)


def chain_transports(pairs: Sequence[TransportPair]) -> TransportPair:
    """Sum of sample-aligned tube pairs on one block (shared bumps cancel exactly)."""
    model, N = pairs[0].model, pairs[0].N
    n = model.n
    lo = np.min([p.anchor for p in pairs], axis=0)
    hi = np.max([p.anchor + (np.array(p.rho.grid.counts) - 1) / N for p in pairs], axis=0)
    counts = tuple(int(round((hi[a] - lo[a]) * N)) + 1 for a in range(n))
    block = Grid(tuple(lo), N, counts)
    rho = np.zeros(block.shape)
    nu = {I: np.zeros(block.shape) for I in pairs[0].nu.arrays()}
    periodic = (False,) * n
    for p in pairs:
        start = [int(round((p.anchor[a] - lo[a]) * N)) for a in range(n)]
        add_block(rho, p.rho.top_coefficient, start, periodic)
        for I, arr in p.nu.arrays().items():
            add_block(nu[I], arr, start, periodic)
    rho_f = DifferentialForm.from_arrays(block, n, {tuple(range(n)): rho})
    nu_f = DifferentialForm.from_arrays(block, n - 1, nu)
    res = float(np.max(np.abs(exterior_derivative(nu_f).top_coefficient - rho)))
    return TransportPair(model, N, rho_f, nu_f, lo, tuple(t for p in pairs for t in p.thetas),
                         pairs[0].lower_integral, pairs[-1].upper_integral,
                         max(p.central_max for p in pairs), res)


def unit_step_transport(cover: CoverData, N: int, axis_index: int) -> TransportPair:
    """Chain moving unit mass from ``P - e`` to ``P`` along a group axis (P = global plateau)."""
    model = cover.model
    a = model.group_axes[axis_index]
    c = cover.global_center()
    e = np.zeros(model.n)
    e[a] = 1.0
    lo, hi = cover.plateau[axis_index]
    if c[a] - BUMP_HALF < lo - 1e-12 or c[a] + BUMP_HALF > hi + 1e-12:
        raise ValueError("global plateau too narrow for the transport bumps")
    box = c.copy()
    for b in model.bounded_axes:
        box[b] = 0.5
    # the box centre only matters on the lateral axes
    first = make_transport(model, N, c - e, c - e / 2, box_center=box)
    second = make_transport(model, N, c - e / 2, c, box_center=box)
    return chain_transports([first, second])


def local_transport(cover: CoverData, N: int, child: int, parent: int) -> tuple[TransportPair, float]:
    """Half-step tube between the plateaus of two adjacent patches at the same group element.

    Returns the +direction tube and the sign with which it moves mass from
    ``child`` to ``parent``.
    """
    model = cover.model
    p, q = cover.patches[child], cover.patches[parent]
    diff = [a for a in range(model.n) if not _same_lift(p.axes[a], q.axes[a])]
    if len(diff) != 1:
        raise ValueError("patches are not adjacent")
    a = diff[0]
    src = np.array([p.plateau_center(b) for b in range(model.n)])
    tgt = np.array([q.plateau_center(b) for b in range(model.n)])
    if a in model.bounded_axes:
        # bumps at 1/4 and 3/4 keep a 3/4 tube inside (1/8, 7/8)
        src[a] = 0.25 if p.axes[a].lo == 0.0 else 0.75
        tgt[a] = 0.75 if src[a] == 0.25 else 0.25
    else:
        tgt[a] = src[a] + (STEP if tgt[a] > src[a] else -STEP)
    sign = 1.0
    if tgt[a] < src[a]:
        src, tgt, sign = tgt, src, -1.0
    box = src + (tgt - src) / 2
    for b in model.bounded_axes:
        if b != a:
            box[b] = min(max(box[b], 7 / 16), 9 / 16)
    for who, centre in ((p, src if sign > 0 else tgt), (q, tgt if sign > 0 else src)):
        for b in range(model.n):
            plo, phi_ = who.axes[b].plateau
            if centre[b] - BUMP_HALF < plo - 1e-12 or centre[b] + BUMP_HALF > phi_ + 1e-12:
                raise ValueError(f"transport bump leaves the plateau of patch {who.index} along axis {b}")
    return make_transport(model, N, src, tgt, box_center=box), sign


# ---------------------------------------------------------------------------
# pipeline


def unit_steps(model: Model, g: Sequence[int]) -> list[tuple[int, int]]:
    """``(axis index, sign)`` unit moves summing to ``g``; minimal on Z/m."""
    grp = model.group
    if grp.finite:
        k = grp.normalize(g)[0]
        return [(0, -1)] * (grp.m - k) if k > grp.m // 2 else [(0, 1)] * k
    return [(a, 1 if v > 0 else -1) for a, v in enumerate(g) for _ in range(abs(v))]


def _in_window(model: Model, g, R: int) -> bool:
    return model.finite or all(-R <= v <= R for v in g)


def _processing_elements(model: Model, R: int) -> list[tuple[int, ...]]:
    return model.elements(R - 2)


def _form_norm(arr: np.ndarray) -> float:
    return float(np.max(np.abs(arr))) if arr.size else 0.0


@dataclass
class StageResult:
    omega: np.ndarray  # top coefficient on the window after the stage
    eta: dict  # (n-1)-form coefficients on the window produced by the stage
    bound: float  # sup-norm bound for eta
    info: dict = field(default_factory=dict)


def _empty_eta(model: Model, grid: Grid) -> dict:
    n = model.n
    return {I: np.zeros(grid.shape) for I in DifferentialForm.zeros(grid, n - 1).arrays()}


def normalize_global(omega: ModelForm, cert: CoinvariantCertificate, phi: PartitionFunction, cover: CoverData,
                     R: int | None = None, tol: float = 1e-6) -> StageResult:
    """Subtract chained unit-step tubes so that ``int^phi omega'`` is the certificate remainder.

    Each certificate pair ``(f_j, g_j)`` telescopes along unit steps
    ``u_t``: ``f_j - g_j . f_j = sum_t (F_t - u_t . F_t)`` with
    ``F_t = (u_1 + .. + u_{t-1}) . f_j``.  A unit-step tube copy at ``h``
    carries ``delta_h - delta_{h-u}``, so ``F - u . F`` is the class of
    ``sum_h F(h) tube(h)`` (for a negative step, of ``-sum_h F(h - e) tube(h)``).
    Coefficients are kept for ``|h| <= R - 1``.
    """
    model, N = omega.model, omega.N
    R = omega.R if R is None else R
    f = integrate_phi(phi, omega, R)
    if not check_certificate(f, cert, R):
        raise StageError("normalize_global", "certificate rejected by check_certificate")
    grid = omega.window_grid
    rho = omega.materialize().top_coefficient.copy()
    norm = _form_norm(rho)
    eta = _empty_eta(model, grid)
    grp = model.group
    Rt = R - 1
    elems = model.elements(Rt)
    coeffs = [dict() for _ in range(model.d)]
    for fj, gj in cert.pairs:
        G = grp.identity()
        for k, sgn in unit_steps(model, gj):
            F = act(G, fj)
            e = grp.generator(k)
            for g in elems:
                val = F(g) - F.background
                if val == 0.0:
                    continue
                h = g if sgn > 0 else grp.add(g, e)
                if not _in_window(model, h, Rt):
                    continue
                coeffs[k][h] = coeffs[k].get(h, 0.0) + (val if sgn > 0 else -val)
            G = grp.add(G, e if sgn > 0 else grp.neg(e))
    bound = 0.0
    tubes = []
    for k in range(model.d):
        if not coeffs[k]:
            continue
        tube = unit_step_transport(cover, N, k)
        tubes.append(tube)
        for h in sorted(coeffs[k]):
            c = coeffs[k][h]
            tube.place(rho, eta, -c, h, grid)
        # eta got -c * nu above; flip the sign: omega - omega' = sum c rho = d(sum c nu)
        bound += 2.0 * max(abs(v) for v in coeffs[k].values()) * tube.nu_norm
    for I in eta:
        eta[I] = -eta[I]
    interior = _processing_elements(model, R)
    masses = phi_values(model, N, phi.values, phi.offset, rho, grid, interior)
    rem = cert.remainder
    worst = max(abs(v - (float(rem(g)) if rem is not None else 0.0)) for g, v in masses.items())
    if worst > tol * max(norm, 1.0):
        raise StageError("normalize_global", f"interior integrals not normalised (max {worst:.3e})")
    info = {"max_interior_mass": worst, "coefficients": sum(len(c) for c in coeffs),
            "tube_residual": max((t.residual for t in tubes), default=0.0)}
    return StageResult(rho, eta, bound, info)


def normalize_local(stage: StageResult, phi: PartitionFunction, cover: CoverData, R: int,
                    tol: float = 1e-6) -> StageResult:
    """Move the patch masses of each interior element to patch 0 along the spanning tree.

    Leaves go first: a child's accumulated mass ``m`` is sent to its parent
    with ``omega += m * tube`` and ``eta -= m * nu``.
    """
    model, N = cover.model, phi.N
    if not phi.pieces:
        raise StageError("normalize_local", "partition function has no patch pieces")
    grid = model.window_grid(N, R)
    rho = stage.omega.copy()
    eta = _empty_eta(model, grid)
    elems = _processing_elements(model, R)
    masses = [phi_values(model, N, p, phi.offset, rho, grid, elems) for p in phi.pieces]
    edges = [(child, parent, *local_transport(cover, N, child, parent)) for child, parent in cover.tree]
    moved = {}
    for g in elems:
        acc = [m[g] for m in masses]
        for child, parent, tube, sign in reversed(edges):
            m = acc[child]
            acc[parent] += m
            acc[child] = 0.0
            if m == 0.0:
                continue
            tube.place(rho, eta, sign * m, g, grid)
            moved[(child, g)] = m
    for I in eta:
        eta[I] = -eta[I]
    # the tube placed eta += sign*m*nu; the primitive piece is the negative
    bound = 0.0
    for child, parent, tube, sign in edges:
        mx = max((abs(v) for (c, _), v in moved.items() if c == child), default=0.0)
        bound += mx * tube.nu_norm
    after = [phi_values(model, N, p, phi.offset, rho, grid, elems) for p in phi.pieces]
    norm = max(_form_norm(stage.omega), 1.0)
    worst = max(abs(m[g]) for m in after[1:] for g in elems) if len(after) > 1 else 0.0
    if worst > tol * norm:
        raise StageError("normalize_local", f"patch masses not cleared (max {worst:.3e})")
    info = {"max_patch_mass": worst, "root_mass": max(abs(after[0][g]) for g in elems),
            "tube_residual": max(e[2].residual for e in edges)}
    return StageResult(rho, eta, bound, info)


def _patch_weights(cover: CoverData, phi: PartitionFunction) -> list[np.ndarray]:
    """``phi_i`` sampled on each patch's own lift (chart domain)."""
    model, N = cover.model, phi.N
    NQ = int(round(cover.scale * N))
    out = []
    for p, piece in zip(cover.patches, phi.pieces):
        start = [int(round(lo * N)) for lo in p.lower]
        out.append(extract_block(piece, start, (NQ + 1,) * model.n, (False,) * model.n))
    return out


def global_primitive(stage: StageResult, phi: PartitionFunction, cover: CoverData, R: int,
                     threads: int | None = None) -> StageResult:
    """Sum over interior elements and patches of the chart primitives of ``phi_i g^* omega''``."""
    model, N = cover.model, phi.N
    s = cover.scale
    NQ = s * N
    if abs(NQ - round(NQ)) > 1e-9 or round(NQ) % 2:
        raise StageError("global_primitive", f"patch side {s} does not give an even sample count at N={N}")
    NQ = int(round(NQ))
    n = model.n
    grid = model.window_grid(N, R)
    rho = stage.omega
    norm = _form_norm(rho)
    weights = _patch_weights(cover, phi)
    qgrid = Grid.box(n, NQ)
    jobs = [(g, i) for g in _processing_elements(model, R) for i in range(len(cover.patches))]

    def work(job):
        g, i = job
        p = cover.patches[i]
        start = model.sample_of(grid, np.array(p.lower) + model.translation(g))
        blk = extract_block(rho, start, (NQ + 1,) * n, grid.periodic) * weights[i]
        if not np.any(blk):
            return None
        for a, sg in enumerate(p.signs):
            if sg < 0:
                blk = np.flip(blk, axis=a)
        blk = blk * s ** n
        if np.prod(p.signs) < 0:
            blk = -blk
        top = DifferentialForm.from_arrays(qgrid, n, {tuple(range(n)): blk})
        tol = 10.0 / NQ ** 2 * _form_norm(blk) + 1e-12 * max(norm, 1e-300)
        solver = primitive_halfbox if p.halfbox else primitive_box
        try:
            res = solver(top, tol=tol, verify=False)
        except (ValueError, AssertionError) as exc:
            raise StageError("global_primitive", f"patch {i} at {g}: {exc}") from exc
        arrays = {}
        for J, arr in res.eta.arrays().items():
            factor = 1.0
            for a in J:
                factor *= p.signs[a] / s
            for a, sg in enumerate(p.signs):
                if sg < 0:
                    arr = np.flip(arr, axis=a)
            arrays[J] = factor * arr
        return start, arrays, res.ratio, res.integral

    threads = thread_count() if threads is None else threads
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    eta = _empty_eta(model, grid)
    worst_ratio, worst_int = 0.0, 0.0
    for r in results:  # fixed order keeps the sum deterministic
        if r is None:
            continue
        start, arrays, ratio, integral = r
        for J, arr in arrays.items():
            add_block(eta[J], arr, start, grid.periodic)
        worst_ratio = max(worst_ratio, ratio)
        worst_int = max(worst_int, abs(integral))
    kn = kn_constant(n)
    bound = len(cover.patches) * s * kn * norm
    info = {"patch_solves": sum(r is not None for r in results), "max_ratio": worst_ratio,
            "max_patch_integral": worst_int, "Kn": kn}
    return StageResult(rho, eta, bound, info)


@dataclass
class SolveReport:
    N: int
    R: int
    residual: float
    relative_residual: float
    omega_norm: float
    eta_norm: float
    bound: float
    k_total: float
    boundary_max: float | None
    stages: dict

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("N", "R", "residual", "relative_residual", "omega_norm",
                                              "eta_norm", "bound", "k_total", "boundary_max", "stages")}


def solve_primitive(omega: ModelForm, cert: CoinvariantCertificate, phi: PartitionFunction | None = None,
                    cover: CoverData | None = None, threads: int | None = None
                    ) -> tuple[DifferentialForm, SolveReport]:
    """Bounded primitive of a zero-class top form on the window interior.

    Returns ``eta`` on the window and a report; the residual
    ``|d eta - omega|`` is measured with finite differences on samples whose
    group coordinates lie in ``[-(R-3), R-2]``.
    """
    model, N, R = omega.model, omega.N, omega.R
    if omega.degree != model.n:
        raise ValueError("solve_primitive needs a top-degree form")
    if not model.finite and R < 4:
        raise ValueError("window radius must be at least 4")
    cover = build_cover(model) if cover is None else cover
    if phi is None:
        from .integration import build_phi_smooth
        phi = build_phi_smooth(cover, N)
    s1 = normalize_global(omega, cert, phi, cover, R)
    s2 = normalize_local(s1, phi, cover, R)
    s3 = global_primitive(s2, phi, cover, R, threads)
    grid = omega.window_grid
    eta_arrays = {I: s1.eta[I] + s2.eta[I] + s3.eta[I] for I in s1.eta}
    eta = DifferentialForm.from_arrays(grid, model.n - 1, eta_arrays)
    target = omega.materialize().top_coefficient
    mask = model.interior_mask(grid, R, 3)
    diff = exterior_derivative(eta).top_coefficient - target
    residual = float(np.max(np.abs(diff[mask])))
    wnorm = _form_norm(target)
    h = 1.0 / N
    eta_norm = sup_norm_form(eta, mask)
    bound = s1.bound + s2.bound + s3.bound
    if eta_norm > bound * (1 + 1e-12) + 1e-300:
        raise StageError("bound", f"|eta| = {eta_norm:.3e} exceeds the stage bound {bound:.3e}")
    boundary = None
    if model.has_boundary:
        b = model.bounded_axes[0]
        tangential = tuple(a for a in range(model.n) if a != b)
        coeff = eta[tangential]
        boundary = max(float(np.max(np.abs(np.take(coeff, 0, axis=b)))),
                       float(np.max(np.abs(np.take(coeff, -1, axis=b)))))
        if boundary != 0.0:
            raise StageError("boundary", f"boundary pullback of eta is {boundary:.3e}, not zero")
    report = SolveReport(
        N, R, residual, residual / (h * h * wnorm) if wnorm > 0 else 0.0, wnorm, eta_norm, bound,
        bound / wnorm if wnorm > 0 else 0.0, boundary,
        {"normalize_global": dict(s1.info, bound=s1.bound), "normalize_local": dict(s2.info, bound=s2.bound),
         "global_primitive": dict(s3.info, bound=s3.bound)},
    )
    return eta, report


def surjectivity_witness(f: EllInftyFn, cover: CoverData, N: int, R: int) -> ModelForm:
    """Top form whose integration map reproduces ``f`` (rays truncated to the window).

    Uses a bump ``beta`` inside the plateau of patch 0 and inside ``[0, 1)``
    with ``int phi beta = 1``; the form is ``sum_g f(g) beta(x - g)`` with the
    background carried by the periodic part.
    """
    from .models import cell_bump_form, periodic_bump_form
    from .integration import block_coordinates, block_shape, build_phi_smooth
    from .fields import Tensor
    from .models import lattice_weights, weighted_total

    model = cover.model
    p0 = cover.patches[0]
    support = []
    for a in range(model.n):
        lo, hi = p0.axes[a].plateau
        if a in model.group_axes:
            lo, hi = max(lo, 0.0), min(hi, 1.0)
        support.append((lo, hi))
    beta = Tensor(tuple(Mollifier(lo, hi) for lo, hi in support))
    phi = build_phi_smooth(cover, N)
    mesh = block_coordinates(model, N)
    vals = np.broadcast_to(beta(*mesh), block_shape(model, N))
    mass = weighted_total(phi.values * vals, lattice_weights(model, N, vals.shape))
    scale = 1.0 / mass
    grp = model.group
    form = None
    if f.background != 0.0:
        form = periodic_bump_form(model, N, R, f.background * scale, support)
    dev = {}
    for g in model.elements(None if model.finite else R - 1):
        v = f(g) - f.background
        if v != 0.0:
            dev[g] = v
    if model.finite:
        dev = {grp.normalize(g): v for g, v in dev.items()}
    local = cell_bump_form(model, N, R, [(g, v * scale) for g, v in sorted(dev.items())], support)
    return local if form is None else form + local
