"""Discretization substrate: uniform grids on [-L, L]^dim, sampled fields, cell sets
and atomic measures.

Grid points are cell centers, x_i = -L + (i + 1/2) h, so no grid point ever sits
on a lattice difference of zero with another cell's center shifted by a half cell.
Everything here is immutable after construction.
"""

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, Field as PydanticField
from scipy.spatial.distance import pdist

from errors import DomainError, GridMismatchError, GridResolutionError

SUPPORTED_DIMS = (1, 2, 3)
DEFAULT_HALF_EXTENT = 4.0


def _frozen(values: np.ndarray) -> np.ndarray:
    values.setflags(write=False)
    return values


@dataclass(frozen=True)
class Grid:
    dim: int
    N: int
    L: float = DEFAULT_HALF_EXTENT

    def __post_init__(self):
        if self.dim not in SUPPORTED_DIMS:
            raise ValueError(f"dim must be one of {SUPPORTED_DIMS}, got {self.dim}")
        if self.N < 2 or self.N & (self.N - 1):
            raise ValueError(f"points_per_axis must be a power of two, got {self.N}")
        if not self.L > 0:
            raise ValueError(f"half_extent must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.N

    @property
    def cell_volume(self) -> float:
        return self.h**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.dim

    def axis(self) -> np.ndarray:
        return -self.L + (np.arange(self.N) + 0.5) * self.h

    def coordinates(self) -> np.ndarray:
        """Cell centers, shape (N,)*dim + (dim,)."""
        axes = np.meshgrid(*([self.axis()] * self.dim), indexing="ij")
        return np.stack(axes, axis=-1)

    def radius(self) -> np.ndarray:
        return np.linalg.norm(self.coordinates(), axis=-1)

    def contains(self, point) -> bool:
        p = np.atleast_1d(np.asarray(point, dtype=float))
        return p.shape == (self.dim,) and bool(np.all(np.abs(p) <= self.L))

    def cell_index(self, point) -> tuple[int, ...]:
        if not self.contains(point):
            raise DomainError(f"point {point} lies outside [-{self.L}, {self.L}]^{self.dim}")
        p = np.atleast_1d(np.asarray(point, dtype=float))
        idx = np.floor((p + self.L) / self.h).astype(int)
        return tuple(int(i) for i in np.clip(idx, 0, self.N - 1))

    def refined(self) -> "Grid":
        return Grid(self.dim, 2 * self.N, self.L)

    def scaled(self, factor: float) -> "Grid":
        return Grid(self.dim, self.N, self.L * factor)

    def require_same(self, other: "Grid") -> None:
        if self != other:
            raise GridMismatchError(f"grid mismatch: {self} vs {other}")


@dataclass(frozen=True, eq=False)
class Field:
    """Real-valued samples on a grid (f, u, potentials)."""

    grid: Grid
    values: np.ndarray
    nonneg: bool = False

    def __post_init__(self):
        values = np.array(self.values, dtype=float, copy=True)
        if values.shape != self.grid.shape:
            values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite")
        if self.nonneg and np.any(values < 0):
            raise ValueError(f"field flagged nonneg has minimum {values.min():.3e}")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def zeros(cls, grid: Grid) -> "Field":
        return cls(grid, np.zeros(grid.shape), nonneg=True)

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "Field":
        return cls(grid, np.full(grid.shape, float(c)), nonneg=c >= 0)

    @classmethod
    def from_function(cls, grid: Grid, fn: Callable[[np.ndarray], np.ndarray], nonneg: bool = False) -> "Field":
        return cls(grid, fn(grid.coordinates()), nonneg=nonneg)

    def with_values(self, values: np.ndarray, nonneg: Optional[bool] = None) -> "Field":
        return Field(self.grid, values, self.nonneg if nonneg is None else nonneg)

    def abs(self) -> "Field":
        return Field(self.grid, np.abs(self.values), nonneg=True)

    def power(self, p: float) -> "Field":
        return Field(self.grid, np.abs(self.values) ** p, nonneg=True)

    def scaled(self, c: float) -> "Field":
        return Field(self.grid, c * self.values, nonneg=self.nonneg and c >= 0)

    def __add__(self, other: "Field") -> "Field":
        self.grid.require_same(other.grid)
        return Field(self.grid, self.values + other.values, nonneg=self.nonneg and other.nonneg)

    def is_zero(self) -> bool:
        return not np.any(self.values)

    def max(self) -> float:
        return float(self.values.max())


@dataclass(frozen=True, eq=False)
class GridSet:
    """Union of closed grid cells; measure counts cells times h^dim."""

    grid: Grid
    mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.mask, dtype=bool, copy=True)
        if mask.shape != self.grid.shape:
            raise GridMismatchError(f"mask shape {mask.shape} does not match grid {self.grid.shape}")
        object.__setattr__(self, "mask", _frozen(mask))

    @classmethod
    def empty(cls, grid: Grid) -> "GridSet":
        return cls(grid, np.zeros(grid.shape, dtype=bool))

    @classmethod
    def full(cls, grid: Grid) -> "GridSet":
        return cls(grid, np.ones(grid.shape, dtype=bool))

    @classmethod
    def box(cls, grid: Grid, lo, hi) -> "GridSet":
        x = grid.coordinates()
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (grid.dim,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (grid.dim,))
        return cls(grid, np.all((x >= lo) & (x <= hi), axis=-1))

    @classmethod
    def ball(cls, grid: Grid, center, radius: float) -> "GridSet":
        c = np.broadcast_to(np.asarray(center, dtype=float), (grid.dim,))
        return cls(grid, np.linalg.norm(grid.coordinates() - c, axis=-1) <= radius)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def measure(self) -> float:
        return self.count * self.grid.cell_volume

    def is_empty(self) -> bool:
        return not self.mask.any()

    def __and__(self, other: "GridSet") -> "GridSet":
        self.grid.require_same(other.grid)
        return GridSet(self.grid, self.mask & other.mask)

    def __or__(self, other: "GridSet") -> "GridSet":
        self.grid.require_same(other.grid)
        return GridSet(self.grid, self.mask | other.mask)

    def dilated(self, factor: float) -> "GridSet":
        """{x : x / factor lies in a cell of this set}, on the same grid."""
        g = self.grid
        idx = np.floor((g.coordinates() / factor + g.L) / g.h).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < g.N), axis=-1)
        idx = np.clip(idx, 0, g.N - 1)
        return GridSet(g, inside & self.mask[tuple(np.moveaxis(idx, -1, 0))])

    def issubset(self, other: "GridSet") -> bool:
        return not np.any(self.mask & ~other.mask)

    def indicator(self) -> Field:
        return Field(self.grid, self.mask.astype(float), nonneg=True)

    def diameter(self) -> float:
        pts = self.grid.coordinates()[self.mask]
        if len(pts) < 2:
            return 0.0
        return float(pdist(pts).max())

    def digest(self) -> str:
        g = self.grid
        header = f"{g.dim}:{g.N}:{g.L!r}:".encode()
        return hashlib.sha256(header + np.packbits(self.mask).tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class AtomicMeasure:
    """Finite sum of point masses inside the grid cube."""

    locations: np.ndarray
    masses: np.ndarray
    support_diameter: float = field(init=False)

    def __post_init__(self):
        masses = np.atleast_1d(np.array(self.masses, dtype=float, copy=True))
        locations = np.array(self.locations, dtype=float, copy=True).reshape(len(masses), -1)
        if np.any(masses < 0) or not np.all(np.isfinite(masses)):
            raise ValueError("atom masses must be finite and nonnegative")
        object.__setattr__(self, "masses", _frozen(masses))
        object.__setattr__(self, "locations", _frozen(locations))
        diam = float(pdist(locations).max()) if len(masses) > 1 else 0.0
        object.__setattr__(self, "support_diameter", diam)

    @classmethod
    def from_cell_masses(cls, masses: Field) -> "AtomicMeasure":
        where = masses.values > 0
        return cls(masses.grid.coordinates()[where], masses.values[where])

    @property
    def dim(self) -> int:
        return self.locations.shape[1]

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def scaled(self, c: float) -> "AtomicMeasure":
        return AtomicMeasure(self.locations, c * self.masses)

    def mass_in(self, region: GridSet) -> float:
        total = 0.0
        for loc, m in zip(self.locations, self.masses):
            if region.mask[region.grid.cell_index(loc)]:
                total += m
        return total


def integrate(f: Field) -> float:
    """Midpoint quadrature of f over the grid cube."""
    return float(f.values.sum() * f.grid.cell_volume)


def superlevel_set(w: Field, t: float, closed: bool = False) -> GridSet:
    """{w > t}, or {w >= t} when closed."""
    if t < 0:
        raise ValueError(f"level must be nonnegative, got {t}")
    return GridSet(w.grid, w.values >= t if closed else w.values > t)


@dataclass(frozen=True, eq=False)
class BallCover:
    balls: tuple[GridSet, ...]
    centers: np.ndarray
    multiplicity: int

    def __len__(self) -> int:
        return len(self.balls)


def unit_ball_cover(grid: Grid, within: Optional[GridSet] = None) -> BallCover:
    """Open balls of diameter 1 centred on a lattice of pitch 1/(2 sqrt(dim)).

    With ``within`` only the balls meeting that set are returned; the reported
    multiplicity is always taken over the returned balls.
    """
    if grid.h >= 0.25:
        raise GridResolutionError(f"grid spacing {grid.h} too coarse to resolve unit balls (need h < 1/4)")
    pitch = 1.0 / (2.0 * math.sqrt(grid.dim))
    kmax = math.ceil((grid.L + 0.5) / pitch)
    x = grid.axis()
    coords = grid.coordinates()

    balls, centers = [], []
    count = np.zeros(grid.shape, dtype=np.int64)
    for k in itertools.product(range(-kmax, kmax + 1), repeat=grid.dim):
        c = np.asarray(k, dtype=float) * pitch
        # restrict the distance computation to the bounding box of the ball
        window = tuple(slice(*np.searchsorted(x, [ci - 0.5, ci + 0.5])) for ci in c)
        if any(w.start >= w.stop for w in window):
            continue
        local = np.linalg.norm(coords[window] - c, axis=-1) < 0.5
        if not local.any():
            continue
        if within is not None and not np.any(local & within.mask[window]):
            continue
        mask = np.zeros(grid.shape, dtype=bool)
        mask[window] = local
        count[window] += local
        balls.append(GridSet(grid, mask))
        centers.append(c)
    return BallCover(tuple(balls), np.asarray(centers).reshape(-1, grid.dim), int(count.max(initial=0)))


# --- serialization ---


class FieldDocument(BaseModel):
    dim: int = PydanticField(description="Spatial dimension")
    N: int = PydanticField(description="Points per axis")
    L: float = PydanticField(description="Half extent of the grid cube")
    values: list[float] = PydanticField(description="Row-major samples")


_HEADER_INT = np.dtype("<i8")
_HEADER_FLOAT = np.dtype("<f8")


def _header(grid: Grid) -> bytes:
    return np.array([grid.dim, grid.N], dtype=_HEADER_INT).tobytes() + np.array([grid.L], dtype=_HEADER_FLOAT).tobytes()


def read_header(raw: bytes) -> tuple[Grid, bytes]:
    dim, n = np.frombuffer(raw[:16], dtype=_HEADER_INT)
    (L,) = np.frombuffer(raw[16:24], dtype=_HEADER_FLOAT)
    return Grid(int(dim), int(n), float(L)), raw[24:]


def write_binary(path: Path | str, grid: Grid, payload: np.ndarray) -> None:
    Path(path).write_bytes(_header(grid) + np.ascontiguousarray(payload, dtype=_HEADER_FLOAT).tobytes())


def write_field(path: Path | str, f: Field) -> None:
    write_binary(path, f.grid, f.values)


def read_field(path: Path | str, nonneg: bool = False) -> Field:
    grid, payload = read_header(Path(path).read_bytes())
    return Field(grid, np.frombuffer(payload, dtype=_HEADER_FLOAT).reshape(grid.shape), nonneg=nonneg)


def field_to_json(f: Field) -> str:
    g = f.grid
    return FieldDocument(dim=g.dim, N=g.N, L=g.L, values=f.values.ravel().tolist()).model_dump_json()


def field_from_json(text: str, nonneg: bool = False) -> Field:
    doc = FieldDocument.model_validate_json(text)
    return Field(Grid(doc.dim, doc.N, doc.L), np.asarray(doc.values), nonneg=nonneg)
