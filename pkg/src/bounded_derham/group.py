"""Deck groups, bounded functions on them, and coinvariant certificates.

Two group models are supported: the lattice Z^d and the cyclic group Z/m,
both written additively with elements as integer tuples.  The left action
on bounded functions is ``(g . f)(h) = f(h + g)``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Iterator

__all__ = [
    "Lattice",
    "Cyclic",
    "EllInftyFn",
    "Ray",
    "CoinvariantCertificate",
    "NotCertifiable",
    "act",
    "coboundary",
    "folner_mean",
    "fingerprint",
    "certify_trivial",
    "check_certificate",
    "delta",
    "constant",
]

Element = tuple[int, ...]


class NotCertifiable(ValueError):
    """The function's class is not zero within the certificate family."""


@dataclass(frozen=True)
class Lattice:
    d: int

    @property
    def rank(self) -> int:
        return self.d

    @property
    def finite(self) -> bool:
        return False

    def identity(self) -> Element:
        return (0,) * self.d

    def normalize(self, g) -> Element:
        g = tuple(int(v) for v in (g if isinstance(g, Iterable) else (g,)))
        if len(g) != self.d:
            raise ValueError(f"element {g} does not belong to Z^{self.d}")
        return g

    def add(self, a: Element, b: Element) -> Element:
        return tuple(x + y for x, y in zip(a, b))

    def neg(self, a: Element) -> Element:
        return tuple(-x for x in a)

    def generator(self, axis: int) -> Element:
        return tuple(1 if a == axis else 0 for a in range(self.d))

    def window(self, R: int) -> Iterator[Element]:
        return itertools.product(range(-R, R + 1), repeat=self.d)

    def window_size(self, R: int) -> int:
        return (2 * R + 1) ** self.d

    def steps(self, g: Element) -> list[Element]:
        """Unit generator steps (axis by axis) whose sum is ``g``."""
        out = []
        for a, v in enumerate(g):
            unit = tuple((1 if v > 0 else -1) if b == a else 0 for b in range(self.d))
            out.extend([unit] * abs(v))
        return out


@dataclass(frozen=True)
class Cyclic:
    m: int

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("cyclic group order must be positive")

    @property
    def rank(self) -> int:
        return 1

    @property
    def d(self) -> int:
        return 1

    @property
    def finite(self) -> bool:
        return True

    def identity(self) -> Element:
        return (0,)

    def normalize(self, g) -> Element:
        g = tuple(int(v) for v in (g if isinstance(g, Iterable) else (g,)))
        if len(g) != 1:
            raise ValueError(f"element {g} does not belong to Z/{self.m}")
        return (g[0] % self.m,)

    def add(self, a: Element, b: Element) -> Element:
        return ((a[0] + b[0]) % self.m,)

    def neg(self, a: Element) -> Element:
        return ((-a[0]) % self.m,)

    def generator(self, axis: int = 0) -> Element:
        return (1 % self.m,)

    def window(self, R: int | None = None) -> Iterator[Element]:
        return ((i,) for i in range(self.m))

    def window_size(self, R: int | None = None) -> int:
        return self.m

    def steps(self, g: Element) -> list[Element]:
        return [(1 % self.m,)] * (g[0] % self.m)


@dataclass(frozen=True)
class Ray:
    """Weighted indicator of ``{base + k e_axis : k >= 0}`` in Z^d."""

    base: Element
    axis: int
    weight: float

    def contains(self, x: Element) -> bool:
        for a, (xa, ba) in enumerate(zip(x, self.base)):
            if a == self.axis:
                if xa < ba:
                    return False
            elif xa != ba:
                return False
        return True


@dataclass(frozen=True)
class EllInftyFn:
    """Bounded function: constant background + finite deviation + weighted rays."""

    group: Lattice | Cyclic
    background: float = 0.0
    deviation: dict = field(default_factory=dict)
    rays: tuple[Ray, ...] = ()

    def __post_init__(self):
        dev = {self.group.normalize(k): v for k, v in self.deviation.items() if v != 0}
        object.__setattr__(self, "deviation", dev)
        if self.rays and self.group.finite:
            raise ValueError("rays are only meaningful on Z^d")

    def __call__(self, g) -> float:
        g = self.group.normalize(g)
        val = self.background + self.deviation.get(g, 0.0)
        for r in self.rays:
            if r.contains(g):
                val += r.weight
        return val

    def terms(self, g) -> list:
        """Summands of the value at ``g`` (exact inputs for exact summation)."""
        g = self.group.normalize(g)
        out = [self.background]
        if g in self.deviation:
            out.append(self.deviation[g])
        out.extend(r.weight for r in self.rays if r.contains(g))
        return out

    def bound(self) -> float:
        dev = max((abs(v) for v in self.deviation.values()), default=0.0)
        return abs(self.background) + sum(abs(r.weight) for r in self.rays) + dev

    def scaled(self, c: float) -> "EllInftyFn":
        return EllInftyFn(self.group, c * self.background, {k: c * v for k, v in self.deviation.items()},
                          tuple(Ray(r.base, r.axis, c * r.weight) for r in self.rays))

    def __add__(self, other: "EllInftyFn") -> "EllInftyFn":
        if other.group != self.group:
            raise ValueError("functions on different groups")
        dev = dict(self.deviation)
        for k, v in other.deviation.items():
            dev[k] = dev.get(k, 0.0) + v
        return EllInftyFn(self.group, self.background + other.background, dev, self.rays + other.rays)

    def __sub__(self, other: "EllInftyFn") -> "EllInftyFn":
        return self + other.scaled(-1.0)

    def dumps(self) -> str:
        return json.dumps({
            "group": {"kind": "cyclic", "m": self.group.m} if isinstance(self.group, Cyclic)
            else {"kind": "lattice", "d": self.group.d},
            "background": float(self.background),
            "deviation": [[list(k), float(v)] for k, v in sorted(self.deviation.items())],
            "rays": [[list(r.base), r.axis, float(r.weight)] for r in self.rays],
        })

    @classmethod
    def loads(cls, text: str) -> "EllInftyFn":
        d = json.loads(text)
        gd = d["group"]
        group = Cyclic(gd["m"]) if gd["kind"] == "cyclic" else Lattice(gd["d"])
        return cls(group, d["background"], {tuple(k): v for k, v in d["deviation"]},
                   tuple(Ray(tuple(b), a, w) for b, a, w in d["rays"]))


def delta(group, g, weight: float = 1.0) -> EllInftyFn:
    return EllInftyFn(group, 0.0, {group.normalize(g): weight})


def constant(group, c: float) -> EllInftyFn:
    return EllInftyFn(group, c)


def act(g, f: EllInftyFn) -> EllInftyFn:
    """Left action ``(g . f)(h) = f(h + g)``: supports and ray bases move by -g."""
    grp = f.group
    g = grp.normalize(g)
    ng = grp.neg(g)
    dev = {grp.add(k, ng): v for k, v in f.deviation.items()}
    rays = tuple(Ray(grp.add(r.base, ng), r.axis, r.weight) for r in f.rays)
    return EllInftyFn(grp, f.background, dev, rays)


def coboundary(f: EllInftyFn, g) -> EllInftyFn:
    """``f - g . f``; the background cancels exactly."""
    moved = act(g, f)
    dev = dict(f.deviation)
    for k, v in moved.deviation.items():
        dev[k] = dev.get(k, 0.0) - v
    rays = f.rays + tuple(Ray(r.base, r.axis, -r.weight) for r in moved.rays)
    return EllInftyFn(f.group, 0.0, dev, rays)


def folner_mean(f: EllInftyFn, R: int | None = None) -> float:
    """Exact average of ``f`` over the box ``[-R, R]^d`` (all of Z/m when finite)."""
    grp = f.group
    if grp.finite:
        return (grp.m * f.background + sum(f.deviation.values())) / grp.m
    size = grp.window_size(R)
    total = f.background * size
    total += sum(v for k, v in f.deviation.items() if all(-R <= x <= R for x in k))
    for r in f.rays:
        others_in = all(-R <= x <= R for a, x in enumerate(r.base) if a != r.axis)
        if others_in:
            count = R - max(r.base[r.axis], -R) + 1
            total += r.weight * max(count, 0)
    return total / size


def fingerprint(f: EllInftyFn) -> float:
    """Class invariant: the sum over G when finite, else the Folner limit of the means."""
    grp = f.group
    if grp.finite:
        return grp.m * f.background + sum(f.deviation.values())
    ray_density = 0.5 if grp.d == 1 else 0.0
    return f.background + ray_density * sum(r.weight for r in f.rays)


@dataclass(frozen=True)
class CoinvariantCertificate:
    """Witness that ``target - remainder = sum_j (f_j - g_j . f_j)``.

    ``remainder`` collects a class component below the caller's tolerance
    (quadrature noise); it is empty for exact certificates.
    """

    pairs: tuple[tuple[EllInftyFn, Element], ...] = ()
    remainder: EllInftyFn | None = None

    def __len__(self) -> int:
        return len(self.pairs)

    def dumps(self) -> str:
        return json.dumps({
            "pairs": [[json.loads(f.dumps()), list(g)] for f, g in self.pairs],
            "remainder": json.loads(self.remainder.dumps()) if self.remainder is not None else None,
        })


def certify_trivial(f: EllInftyFn, tol: float = 0.0) -> CoinvariantCertificate:
    """Write a class-zero ``f`` as an explicit sum of coboundaries.

    On Z^d each deviation point ``a`` is killed by the ray telescope
    ``delta_a = R_a - (-e_1) . R_a``.  On Z/m the arc indicators
    ``A_a = 1_{a..m-1}`` give ``A_a - (-1) . A_a = delta_a - delta_0``.
    A class component of size at most ``tol`` is split off as the remainder.
    """
    grp = f.group
    if f.rays:
        raise NotCertifiable("functions with ray terms are outside the certified family")
    fp = fingerprint(f)
    if abs(fp) > tol:
        raise NotCertifiable(f"class fingerprint {fp!r} exceeds tolerance {tol!r}")
    if not grp.finite:
        remainder = EllInftyFn(grp, f.background) if f.background != 0 else None
        back = grp.neg(grp.generator(0))
        pairs = tuple(
            (EllInftyFn(grp, 0.0, {}, (Ray(a, 0, v),)), back)
            for a, v in sorted(f.deviation.items())
        )
        return CoinvariantCertificate(pairs, remainder)

    m = grp.m
    vals = [Fraction(f.background) + Fraction(f.deviation.get((i,), 0.0)) for i in range(m)]
    total = sum(vals, Fraction(0))
    remainder = None
    if total != 0:
        remainder = EllInftyFn(grp, 0.0, {(0,): total})
    back = (m - 1,)
    pairs = []
    for a in range(1, m):
        w = vals[a]
        if w == 0:
            continue
        arc = {(i,): w for i in range(a, m)}
        pairs.append((EllInftyFn(grp, 0.0, arc), back))
    return CoinvariantCertificate(tuple(pairs), remainder)


def check_certificate(f: EllInftyFn, cert: CoinvariantCertificate, R: int | None = None) -> bool:
    """Exact check of ``f - remainder - sum_j (f_j - g_j . f_j) == 0`` on the window.

    Every summand is converted to a Fraction, so the test is free of
    rounding; on Z/m the window is the whole group.
    """
    grp = f.group
    pts = grp.window(R) if not grp.finite else grp.window()
    pairs = [(fj, grp.normalize(gj)) for fj, gj in cert.pairs]
    for x in pts:
        acc = sum((Fraction(t) for t in f.terms(x)), Fraction(0))
        if cert.remainder is not None:
            acc -= sum((Fraction(t) for t in cert.remainder.terms(x)), Fraction(0))
        for fj, gj in pairs:
            acc -= sum((Fraction(t) for t in fj.terms(x)), Fraction(0))
            acc += sum((Fraction(t) for t in fj.terms(grp.add(x, gj))), Fraction(0))
        if acc != 0:
            return False
    return True
