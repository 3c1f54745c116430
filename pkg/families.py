"""Seeded sample families. Each sample is a grid-independent recipe, so the same
seed realizes the same continuous object at N and 2N."""

from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from capacity import CapacityProblem
from functionals import capacitary_density
from grid import AtomicMeasure, Field, Grid, GridSet
from kernels import KernelSpec


class Recipe(Protocol):
    def realize(self, grid: Grid): ...

    def dilated(self, factor: float) -> "Recipe": ...


@dataclass(frozen=True)
class BumpSum:
    """sum_i a_i exp(-|x - c_i|^2 / (2 w_i^2))."""

    centers: tuple[tuple[float, ...], ...]
    widths: tuple[float, ...]
    amplitudes: tuple[float, ...]

    def realize(self, grid: Grid) -> Field:
        x = grid.coordinates()
        out = np.zeros(grid.shape)
        for c, w, a in zip(self.centers, self.widths, self.amplitudes):
            out += a * np.exp(-np.sum((x - np.asarray(c)) ** 2, axis=-1) / (2 * w * w))
        return Field(grid, out, nonneg=True)

    def dilated(self, factor: float) -> "BumpSum":
        return BumpSum(
            tuple(tuple(factor * ci for ci in c) for c in self.centers),
            tuple(factor * w for w in self.widths),
            self.amplitudes,
        )

    def scaled(self, c: float) -> "BumpSum":
        return BumpSum(self.centers, self.widths, tuple(c * a for a in self.amplitudes))


@dataclass(frozen=True)
class Shape:
    kind: str  # "ball" or "box"
    center: tuple[float, ...]
    size: float  # radius, or half side

    def realize(self, grid: Grid) -> GridSet:
        if self.kind == "ball":
            return GridSet.ball(grid, self.center, self.size)
        c = np.asarray(self.center)
        return GridSet.box(grid, c - self.size, c + self.size)


@dataclass(frozen=True)
class SetUnion:
    shapes: tuple[Shape, ...]

    def realize(self, grid: Grid) -> GridSet:
        E = GridSet.empty(grid)
        for shape in self.shapes:
            E = E | shape.realize(grid)
        return E

    def dilated(self, factor: float) -> "SetUnion":
        return SetUnion(tuple(
            Shape(s.kind, tuple(factor * ci for ci in s.center), factor * s.size) for s in self.shapes
        ))


@dataclass(frozen=True)
class CapacitaryDensity:
    """(G*mu^E)^(s'-1) for the capacitary measure of a set union."""

    sets: SetUnion
    spec: KernelSpec
    s: float
    tol: float = 1e-3

    def realize(self, grid: Grid) -> Field:
        return capacitary_density(CapacityProblem(self.spec, grid, self.sets.realize(grid), self.s), self.tol)

    def dilated(self, factor: float) -> "CapacitaryDensity":
        return CapacitaryDensity(self.sets.dilated(factor), self.spec, self.s, self.tol)


@dataclass(frozen=True)
class Atoms:
    locations: tuple[tuple[float, ...], ...]
    masses: tuple[float, ...]

    def realize(self, grid: Grid) -> AtomicMeasure:
        return AtomicMeasure(np.asarray(self.locations), np.asarray(self.masses))

    def dilated(self, factor: float) -> "Atoms":
        return Atoms(tuple(tuple(factor * ci for ci in c) for c in self.locations), self.masses)

    def scaled(self, c: float) -> "Atoms":
        return Atoms(self.locations, tuple(c * m for m in self.masses))


@dataclass(frozen=True)
class TestFamily:
    name: str
    count: int
    seed: int
    generator: Callable[[np.random.Generator], Recipe]

    __test__ = False

    def recipes(self) -> list[Recipe]:
        # one stream per sample, so a sample does not depend on how many precede it
        return [self.generator(np.random.default_rng([self.seed, i])) for i in range(self.count)]

    def realize(self, grid: Grid) -> list:
        return [recipe.realize(grid) for recipe in self.recipes()]

    def dilated(self, factor: float) -> "TestFamily":
        """The same samples with every length multiplied by ``factor``."""
        return TestFamily(f"{self.name}_d{factor:g}", self.count, self.seed,
                          lambda rng: self.generator(rng).dilated(factor))


def _point(rng: np.random.Generator, dim: int, extent: float) -> tuple[float, ...]:
    return tuple(float(v) for v in rng.uniform(-extent, extent, size=dim))


def bump_sums(dim: int, count: int, seed: int, extent: float = 2.0) -> TestFamily:
    """1-5 Gaussian bumps, widths in (0.1, 0.5), dyadic amplitudes 2^-2 ... 2^2."""

    def make(rng: np.random.Generator) -> BumpSum:
        k = int(rng.integers(1, 6))
        return BumpSum(
            tuple(_point(rng, dim, extent) for _ in range(k)),
            tuple(float(w) for w in rng.uniform(0.1, 0.5, size=k)),
            tuple(float(2.0**j) for j in rng.integers(-2, 3, size=k)),
        )

    return TestFamily("bump_sums", count, seed, make)


def set_unions(dim: int, count: int, seed: int, extent: float = 2.0) -> TestFamily:
    """Unions of 1-3 balls and boxes of radius or half side in (0.2, 0.8)."""

    def make(rng: np.random.Generator) -> SetUnion:
        k = int(rng.integers(1, 4))
        return SetUnion(tuple(
            Shape(str(rng.choice(["ball", "box"])), _point(rng, dim, extent), float(rng.uniform(0.2, 0.8)))
            for _ in range(k)
        ))

    return TestFamily("set_unions", count, seed, make)


def capacitary_densities(spec: KernelSpec, s: float, count: int, seed: int, tol: float = 1e-3) -> TestFamily:
    sets = set_unions(spec.dim, count, seed)

    def make(rng: np.random.Generator) -> CapacitaryDensity:
        return CapacitaryDensity(sets.generator(rng), spec, s, tol)

    return TestFamily("capacitary_densities", count, seed, make)


def atomic_measures(dim: int, count: int, seed: int, diameter: tuple[float, float] = (0.2, 0.9)) -> TestFamily:
    """1-4 atoms inside B_{1/2}(0); with two or more atoms the support diameter is drawn from ``diameter``."""

    def make(rng: np.random.Generator) -> Atoms:
        k = int(rng.integers(1, 5))
        d = float(rng.uniform(*diameter))
        direction = rng.normal(size=dim)
        direction /= np.linalg.norm(direction)
        points = [0.5 * d * direction, -0.5 * d * direction][:k]
        while len(points) < k:
            # uniform in the ball of radius d/2 keeps the diameter at d
            v = rng.normal(size=dim)
            v *= 0.5 * d * rng.uniform() ** (1 / dim) / np.linalg.norm(v)
            points.append(v)
        return Atoms(
            tuple(tuple(float(c) for c in p) for p in points),
            tuple(float(m) for m in rng.uniform(0.5, 2.0, size=k)),
        )

    return TestFamily("atomic_measures", count, seed, make)


def far_bumps(dim: int, count: int, seed: int, separation: float = 4.0) -> TestFamily:
    """Two narrow bumps ``separation`` apart along a random axis direction."""

    def make(rng: np.random.Generator) -> BumpSum:
        direction = np.zeros(dim)
        direction[int(rng.integers(dim))] = 1.0
        half = 0.5 * separation * direction
        return BumpSum(
            (tuple(float(v) for v in half), tuple(float(v) for v in -half)),
            tuple(float(w) for w in rng.uniform(0.1, 0.3, size=2)),
            (1.0, float(2.0 ** rng.integers(-2, 3))),
        )

    return TestFamily("far_bumps", count, seed, make)


FAMILIES: dict[str, Callable[..., TestFamily]] = {
    "bump_sums": bump_sums,
    "set_unions": set_unions,
    "atomic_measures": atomic_measures,
    "far_bumps": far_bumps,
}


def family_for(name: str, dim: int, count: int, seed: int, spec: Optional[KernelSpec] = None,
               s: Optional[float] = None) -> TestFamily:
    if name == "capacitary_densities":
        if spec is None or s is None:
            raise ValueError("capacitary densities need a kernel and an exponent")
        return capacitary_densities(spec, s, count, seed)
    if name not in FAMILIES:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES) + ['capacitary_densities']}")
    return FAMILIES[name](dim, count, seed)
