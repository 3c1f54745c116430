"""Centered local Hardy-Littlewood maximal function on grids."""

import math
from dataclasses import dataclass
from typing import Optional

import logfire
import numpy as np
from scipy import ndimage, signal

from capacity import check_exponents
from grid import Field, Grid
from kernels import KernelKind, KernelSpec, cached_table, convolve

BOUNDARY_POLICY = "clipped"
_DIRECT_FOOTPRINT_CELLS = 4096


@dataclass(frozen=True)
class RadiusSet:
    radii: tuple[float, ...]

    def __post_init__(self):
        if not self.radii:
            raise ValueError("radius set is empty")
        radii = tuple(sorted({float(r) for r in self.radii}))
        if radii[0] <= 0:
            raise ValueError("radii must be positive")
        object.__setattr__(self, "radii", radii)

    @classmethod
    def auto(cls, grid: Grid, upper: float = 1.0) -> "RadiusSet":
        """h, 2h, 4h, ... below ``upper``, and ``upper`` itself."""
        if grid.h > upper:
            raise ValueError(f"grid spacing {grid.h} exceeds the largest radius {upper}")
        count = math.floor(math.log2(upper / grid.h)) + 1
        radii = {grid.h * 2.0**j for j in range(count)} | {upper}
        return cls(tuple(radii))

    @classmethod
    def global_radii(cls, grid: Grid) -> "RadiusSet":
        return cls.auto(grid, upper=2.0 * grid.L * math.sqrt(grid.dim))

    def check(self, grid: Grid, upper: float = 1.0) -> "RadiusSet":
        """Radii must lie in [h, upper]; a top radius below upper only lower-bounds the sup."""
        if self.radii[0] < grid.h * (1 - 1e-9):
            raise ValueError(f"smallest radius {self.radii[0]:g} is below the grid spacing {grid.h:g}")
        if self.max > upper * (1 + 1e-9):
            raise ValueError(f"largest radius {self.max:g} exceeds {upper:g}")
        if self.max < upper * (1 - 1e-9):
            logfire.warn("radius set stops at {top:g} below {upper:g}", top=self.max, upper=upper)
        return self

    @property
    def max(self) -> float:
        return self.radii[-1]

    def __or__(self, other: "RadiusSet") -> "RadiusSet":
        return RadiusSet(tuple(set(self.radii) | set(other.radii)))


def ball_footprint(grid: Grid, r: float) -> np.ndarray:
    """Offsets whose cell centers lie within distance r of the origin cell's center."""
    m = int(math.floor(r / grid.h + 1e-9))
    axis = np.arange(-m, m + 1) * grid.h
    offsets = np.stack(np.meshgrid(*([axis] * grid.dim), indexing="ij"), axis=-1)
    return np.linalg.norm(offsets, axis=-1) <= r * (1 + 1e-12)


def _ball_sums(values: np.ndarray, footprint: np.ndarray) -> np.ndarray:
    if footprint.size <= _DIRECT_FOOTPRINT_CELLS:
        return ndimage.correlate(values, footprint.astype(float), mode="constant", cval=0.0)
    # footprint is symmetric, so convolution and correlation agree
    return np.maximum(signal.fftconvolve(values, footprint.astype(float), mode="same"), 0.0)


def local_maximal(f: Field, radii: Optional[RadiusSet] = None, upper: float = 1.0) -> Field:
    """max over r in radii of the average of |f| over the grid ball of radius r, and |f| itself.

    Balls cut by the boundary are averaged over their interior cells only.
    """
    radii = (radii or RadiusSet.auto(f.grid, upper)).check(f.grid, upper)
    a = np.abs(f.values)
    out = a.copy()
    ones = np.ones(f.grid.shape)
    for r in radii.radii:
        footprint = ball_footprint(f.grid, r)
        counts = np.rint(_ball_sums(ones, footprint))
        np.maximum(out, _ball_sums(a, footprint) / counts, out=out)
    logfire.debug("local maximal over {count} radii, boundary policy {policy}", count=len(radii.radii),
                  policy=BOUNDARY_POLICY)
    return Field(f.grid, out, nonneg=True)


def global_maximal(f: Field, spec: KernelSpec) -> Field:
    """Centered maximal function with radii up to the cube diameter; Riesz mode only."""
    if spec.kind is not KernelKind.RIESZ:
        raise ValueError("the global maximal function is available for the Riesz kernel only")
    radii = RadiusSet.global_radii(f.grid)
    return local_maximal(f, radii, upper=radii.max)


def potential_maximal_domination(h_field: Field, q: float, spec: KernelSpec, s: float,
                                 radii: Optional[RadiusSet] = None, global_radii: bool = False) -> float:
    """sup over the grid of M[(G*h)^(1/q)] / (G*h)^(1/q)."""
    if not q > 0:
        raise ValueError(f"q must be positive, got {q}")
    check_exponents(spec, s)
    if np.any(h_field.values < 0) or h_field.is_zero():
        raise ValueError("h must be nonnegative and not identically zero")
    if global_radii:
        if spec.kind is not KernelKind.RIESZ:
            raise ValueError("the global maximal function is available for the Riesz kernel only")
        radii = RadiusSet.global_radii(h_field.grid)
    potential = convolve(cached_table(spec, h_field.grid), h_field)
    if np.any(potential.values <= 0):
        raise ValueError("potential of a nonzero nonnegative density vanished; kernel table is degenerate")
    g = potential.power(1.0 / q)
    upper = radii.max if global_radii else 1.0
    ratio = float(np.max(local_maximal(g, radii, upper).values / g.values))
    logfire.info("potential maximal domination {kernel} q={q}: {ratio=:.4f}", kernel=spec.label, q=q, ratio=ratio)
    return ratio
