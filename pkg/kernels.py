"""Bessel and Riesz kernels, cell-averaged kernel tables and zero-padded spectral
convolution.

Fourier convention: angular frequency with (2 pi)^-n on the inverse transform, so
that (1 + |xi|^2)^(-alpha/2) inverts to the heat-kernel subordination integral

    G_a(x) = [(4 pi)^(n/2) Gamma(a/2)]^-1  int_0^inf t^((a-n)/2 - 1) exp(-t - |x|^2/(4t)) dt.

Dropping exp(-t) gives the Riesz kernel gamma(n, a) |x|^(a-n). Cell averages use the
same representation: the average of the Gaussian over an axis-aligned cell
factorizes into one erf difference per axis, leaving a single t-integral.
"""

import itertools
import math
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache
from pathlib import Path

import logfire
import numpy as np
from pydantic import BaseModel, ConfigDict, Field as PydanticField, model_validator
from scipy import fft
from scipy.integrate import tanhsinh
from scipy.special import erf, gammaln, log_ndtr

from errors import DomainError, SingularityError
from grid import AtomicMeasure, Field, Grid, read_header, write_binary

QUADRATURE_RTOL = 1e-10
CELL_VARIATION_THRESHOLD = 0.01
_CHUNK = 4096


class KernelKind(str, Enum):
    BESSEL = "bessel"
    RIESZ = "riesz"


class KernelSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: KernelKind = PydanticField(description="Bessel (G_alpha) or Riesz (I_alpha) kernel")
    alpha: float = PydanticField(gt=0, description="Order of the potential")
    dim: int = PydanticField(ge=1, le=3, description="Spatial dimension n")

    @model_validator(mode="after")
    def _riesz_order(self) -> "KernelSpec":
        if self.kind is KernelKind.RIESZ and not self.alpha < self.dim:
            raise ValueError(f"Riesz kernel needs 0 < alpha < n, got alpha={self.alpha}, n={self.dim}")
        return self

    @property
    def label(self) -> str:
        return f"{self.kind.value}(alpha={self.alpha:g}, n={self.dim})"


def gamma_constant(n: int, alpha: float) -> float:
    """gamma(n, a) = Gamma((n-a)/2) / [pi^(n/2) 2^a Gamma(a/2)]."""
    return math.exp(gammaln((n - alpha) / 2) - gammaln(alpha / 2)) / (math.pi ** (n / 2) * 2**alpha)


def _log_norm(spec: KernelSpec) -> float:
    return -(spec.dim / 2) * math.log(4 * math.pi) - gammaln(spec.alpha / 2)


def _damping(spec: KernelSpec) -> float:
    return 1.0 if spec.kind is KernelKind.BESSEL else 0.0


def _split_point(r: np.ndarray) -> np.ndarray:
    return np.maximum(1.0, r**2 / 4.0)


def _integrate_split(integrand, r: np.ndarray, args: tuple) -> np.ndarray:
    """int_0^inf integrand(t, *args) dt, elementwise, split at max(1, r^2/4)."""
    t0 = _split_point(r)
    head = tanhsinh(integrand, 0.0, t0, args=args, rtol=QUADRATURE_RTOL)
    tail = tanhsinh(integrand, t0, np.inf, args=args, rtol=QUADRATURE_RTOL)
    failed = ~(head.success & tail.success)
    if np.any(failed):
        logfire.warn("kernel quadrature below target accuracy at {count} nodes", count=int(failed.sum()))
    return head.integral + tail.integral


def _chunked(fn, *arrays: np.ndarray) -> np.ndarray:
    n = len(arrays[0])
    out = np.empty(n)
    for start in range(0, n, _CHUNK):
        stop = min(start + _CHUNK, n)
        out[start:stop] = fn(*(a[start:stop] for a in arrays))
    return out


def _as_points(spec: KernelSpec, x) -> tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=float)
    scalar = pts.ndim <= 1
    pts = pts.reshape(-1, spec.dim) if pts.ndim <= 1 else pts
    if pts.shape[-1] != spec.dim:
        raise ValueError(f"points must have {spec.dim} coordinates, got shape {pts.shape}")
    return pts, scalar


def riesz_profile(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    return gamma_constant(spec.dim, spec.alpha) * np.asarray(r, dtype=float) ** (spec.alpha - spec.dim)


def bessel_profile(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    """G_alpha at radii r > 0 by double-exponential quadrature of the subordination integral."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    p = (spec.alpha - spec.dim) / 2 - 1
    log_c = _log_norm(spec)

    def integrand(t, r2):
        return np.exp(log_c + p * np.log(t) - t - r2 / (4 * t))

    flat = r.ravel()
    out = _chunked(lambda rr: _integrate_split(integrand, rr, (rr**2,)), flat)
    return out.reshape(r.shape)


def radial_profile(spec: KernelSpec, r: np.ndarray) -> np.ndarray:
    if spec.kind is KernelKind.RIESZ:
        return riesz_profile(spec, r)
    return bessel_profile(spec, r)


def riesz_value(spec: KernelSpec, x):
    if spec.kind is not KernelKind.RIESZ:
        raise ValueError(f"riesz_value needs a Riesz spec, got {spec.kind.value}")
    pts, scalar = _as_points(spec, x)
    r = np.linalg.norm(pts, axis=-1)
    if np.any(r == 0):
        raise SingularityError("Riesz kernel is singular at 0; use cell averages")
    values = riesz_profile(spec, r)
    return float(values.ravel()[0]) if scalar else values


def bessel_value(spec: KernelSpec, x):
    if spec.kind is not KernelKind.BESSEL:
        raise ValueError(f"bessel_value needs a Bessel spec, got {spec.kind.value}")
    pts, scalar = _as_points(spec, x)
    r = np.linalg.norm(pts, axis=-1)
    if np.any(r == 0):
        if spec.alpha <= spec.dim:
            raise SingularityError(f"G_alpha is singular at 0 for alpha={spec.alpha} <= n={spec.dim}")
        # alpha > n: G(0) = Gamma((a-n)/2) / [(4 pi)^(n/2) Gamma(a/2)]
        g0 = math.exp(_log_norm(spec) + gammaln((spec.alpha - spec.dim) / 2))
        values = np.where(r == 0, g0, 0.0)
        nz = r > 0
        if np.any(nz):
            values[nz] = bessel_profile(spec, r[nz])
    else:
        values = bessel_profile(spec, r)
    return float(np.ravel(values)[0]) if scalar else values


def _log_gauss_mass(a: np.ndarray, b: np.ndarray, sqrt_t: np.ndarray) -> np.ndarray:
    """log of int_a^b exp(-y^2/(4t)) dy / sqrt(pi t), i.e. log[erf(b/2sqrt t) - erf(a/2sqrt t)]."""
    # put the interval on the positive half-line when it does not straddle 0
    flip = b <= 0
    lo = np.where(flip, -b, a) / (2 * sqrt_t)
    hi = np.where(flip, -a, b) / (2 * sqrt_t)
    straddle = (a < 0) & (b > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        # erfc(x) = 2 ndtr(-x sqrt 2)
        log_erfc_lo = math.log(2) + log_ndtr(-lo * math.sqrt(2))
        log_erfc_hi = math.log(2) + log_ndtr(-hi * math.sqrt(2))
        one_side = log_erfc_lo + np.log1p(-np.exp(log_erfc_hi - log_erfc_lo))
        both = np.log(erf(hi) + erf(-lo))
    return np.where(straddle, both, one_side)


def kernel_cell_average(spec: KernelSpec, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Average of the kernel over the boxes [lower, upper] (arrays of shape (m, dim))."""
    lower = np.asarray(lower, dtype=float).reshape(-1, spec.dim)
    upper = np.asarray(upper, dtype=float).reshape(-1, spec.dim)
    widths = upper - lower
    p = (spec.alpha - spec.dim) / 2 - 1
    kappa = _damping(spec)
    log_c = _log_norm(spec)

    def integrand(t, *bounds):
        sqrt_t = np.sqrt(t)
        log_val = log_c + p * np.log(t) - kappa * t
        for i in range(spec.dim):
            a, b, w = bounds[3 * i], bounds[3 * i + 1], bounds[3 * i + 2]
            log_val = log_val + 0.5 * np.log(math.pi * t) - np.log(w) + _log_gauss_mass(a, b, sqrt_t)
        return np.exp(log_val)

    centers = 0.5 * (lower + upper)
    r = np.linalg.norm(centers, axis=-1)

    def run(r_chunk, *cols):
        return _integrate_split(integrand, r_chunk, cols)

    cols = []
    for i in range(spec.dim):
        cols += [lower[:, i], upper[:, i], widths[:, i]]
    return _chunked(run, r, *cols)


@dataclass(frozen=True, eq=False)
class KernelTable:
    """Kernel samples for every lattice offset in [-(N-1), N-1]^dim.

    ``samples[k + (N-1)]`` holds the value for offset k; the origin cell and cells
    across which the kernel varies by more than 1% carry cell averages.
    """

    spec: KernelSpec
    grid: Grid
    samples: np.ndarray

    def __post_init__(self):
        expected = (2 * self.grid.N - 1,) * self.grid.dim
        if self.samples.shape != expected:
            raise ValueError(f"table shape {self.samples.shape}, expected {expected}")
        self.samples.setflags(write=False)

    def at(self, offset) -> float:
        idx = tuple(int(k) + self.grid.N - 1 for k in np.atleast_1d(offset))
        return float(self.samples[idx])

    @property
    def padded_shape(self) -> tuple[int, ...]:
        return (2 * self.grid.N,) * self.grid.dim

    @cached_property
    def spectrum(self) -> np.ndarray:
        wrapped = np.zeros(self.padded_shape)
        wrapped[(slice(0, 2 * self.grid.N - 1),) * self.grid.dim] = self.samples
        wrapped = np.roll(wrapped, shift=-(self.grid.N - 1), axis=tuple(range(self.grid.dim)))
        return fft.rfftn(wrapped)


def _needs_average(spec: KernelSpec, r: np.ndarray, h: float) -> np.ndarray:
    half_diag = 0.5 * h * math.sqrt(spec.dim)
    inner = r - half_diag
    with np.errstate(divide="ignore"):
        slope = abs(spec.alpha - spec.dim) / np.where(inner > 0, inner, np.inf) + _damping(spec)
    variation = np.expm1(2 * half_diag * slope)
    return (inner <= 0) | (variation > CELL_VARIATION_THRESHOLD)


def build_table(spec: KernelSpec, grid: Grid) -> KernelTable:
    if spec.dim != grid.dim:
        raise ValueError(f"kernel dimension {spec.dim} does not match grid dimension {grid.dim}")
    n, h = grid.N, grid.h
    with logfire.span("build kernel table {kernel} N={N}", kernel=spec.label, N=n):
        # radial symmetry: evaluate once per sorted tuple of absolute offsets
        canonical = np.array(
            list(itertools.combinations_with_replacement(range(n), grid.dim)), dtype=np.int64
        )
        r = h * np.linalg.norm(canonical, axis=-1)
        averaged = _needs_average(spec, r, h)
        values = np.empty(len(canonical))
        if np.any(averaged):
            c = canonical[averaged] * h
            values[averaged] = kernel_cell_average(spec, c - h / 2, c + h / 2)
        if np.any(~averaged):
            values[~averaged] = radial_profile(spec, r[~averaged])
        logfire.debug("kernel table: {averaged} of {total} classes cell-averaged",
                      averaged=int(averaged.sum()), total=len(canonical))

        offsets = np.abs(np.indices((2 * n - 1,) * grid.dim, dtype=np.int32) - (n - 1))
        keys = np.sort(offsets.reshape(grid.dim, -1), axis=0)
        # rank of each sorted offset tuple among the canonical tuples
        lookup = np.zeros((n,) * grid.dim, dtype=np.int64)
        lookup[tuple(canonical.T)] = np.arange(len(canonical))
        samples = values[lookup[tuple(keys)]].reshape((2 * n - 1,) * grid.dim)
    return KernelTable(spec, grid, samples)


def convolve(table: KernelTable, f: Field) -> Field:
    """Linear convolution h^n sum_y table[x - y] f(y) by zero padding to 2N per axis."""
    table.grid.require_same(f.grid)
    grid = f.grid
    padded = np.zeros(table.padded_shape)
    padded[(slice(0, grid.N),) * grid.dim] = f.values
    full = fft.irfftn(fft.rfftn(padded) * table.spectrum, s=table.padded_shape)
    out = full[(slice(0, grid.N),) * grid.dim] * grid.cell_volume
    if f.nonneg:
        out = np.maximum(out, 0.0)
    return Field(grid, out, nonneg=f.nonneg)


def direct_convolve(table: KernelTable, f: Field) -> Field:
    """O(N^(2n)) reference summation of the same linear convolution."""
    table.grid.require_same(f.grid)
    grid = f.grid
    flipped = table.samples[(slice(None, None, -1),) * grid.dim]
    out = np.empty(grid.shape)
    for i in np.ndindex(*grid.shape):
        block = flipped[tuple(slice(grid.N - 1 - k, 2 * grid.N - 1 - k) for k in i)]
        out[i] = np.sum(block * f.values)
    return Field(grid, out * grid.cell_volume, nonneg=f.nonneg)


def convolve_measure(table: KernelTable, mu: AtomicMeasure) -> Field:
    """x -> sum of mass * kernel(x - location); cell averages within one spacing of an atom."""
    grid, spec = table.grid, table.spec
    if mu.dim != grid.dim:
        raise ValueError(f"measure dimension {mu.dim} does not match grid dimension {grid.dim}")
    coords = grid.coordinates().reshape(-1, grid.dim)
    out = np.zeros(len(coords))
    for loc, mass in zip(mu.locations, mu.masses):
        if not grid.contains(loc):
            raise DomainError(f"atom at {loc} lies outside the grid cube")
        if mass == 0:
            continue
        d = coords - loc
        r = np.linalg.norm(d, axis=-1)
        near = r < grid.h
        values = np.empty(len(coords))
        if np.any(near):
            values[near] = kernel_cell_average(spec, d[near] - grid.h / 2, d[near] + grid.h / 2)
        values[~near] = radial_profile(spec, r[~near])
        out += mass * values
    return Field(grid, out.reshape(grid.shape), nonneg=True)


class TwoSidedBounds(BaseModel):
    c_near: float = PydanticField(description="max ratio of G_alpha(x) and |x|^(alpha-n) for |x| <= min(15, 2L)")
    c_far: float = PydanticField(description="max ratio of G_alpha(x) and G_alpha(x+y) for |x| >= 3, |y| <= 1")
    near_radius: float
    far_radii: tuple[float, float]


def check_two_sided(spec: KernelSpec, grid: Grid, samples: int = 64) -> TwoSidedBounds:
    if spec.kind is not KernelKind.BESSEL:
        raise ValueError("two-sided comparison is stated for the Bessel kernel")
    if grid.L < 4:
        raise ValueError(f"grid half extent must be at least 4, got {grid.L}")
    n = grid.N
    canonical = np.array(list(itertools.combinations_with_replacement(range(n), grid.dim)))[1:]
    r = np.unique(grid.h * np.linalg.norm(canonical, axis=-1))
    near_radius = min(15.0, 2 * grid.L)
    r = r[r <= near_radius]
    g = bessel_profile(spec, r)
    power = r ** (spec.alpha - spec.dim)
    c_near = float(np.max(np.maximum(g / power, power / g)))

    far = np.linspace(3.0, 2 * grid.L, samples)
    shifts = np.linspace(-1.0, 1.0, 21)
    base = bessel_profile(spec, far)
    moved = bessel_profile(spec, (far[:, None] + shifts[None, :]).ravel()).reshape(len(far), len(shifts))
    ratio = moved / base[:, None]
    c_far = float(np.max(np.maximum(ratio, 1.0 / ratio)))
    logfire.info("two-sided kernel bounds {kernel}: C1={c1:.4g} C2={c2:.4g}", kernel=spec.label, c1=c_near, c2=c_far)
    return TwoSidedBounds(c_near=c_near, c_far=c_far, near_radius=near_radius, far_radii=(3.0, 2 * grid.L))


def write_table(path: Path | str, table: KernelTable) -> None:
    write_binary(path, table.grid, table.samples)


def read_table(path: Path | str, spec: KernelSpec) -> KernelTable:
    grid, payload = read_header(Path(path).read_bytes())
    samples = np.frombuffer(payload, dtype="<f8").reshape((2 * grid.N - 1,) * grid.dim).copy()
    return KernelTable(spec, grid, samples)


@lru_cache(maxsize=16)
def cached_table(spec: KernelSpec, grid: Grid) -> KernelTable:
    return build_table(spec, grid)


def power_method_norm(table: KernelTable, mask: np.ndarray, iters: int = 40, seed: int = 0) -> float:
    """Estimate of ||f -> (G*f) restricted to mask|| by power iteration on K*K."""
    rng = np.random.default_rng(seed)
    v = rng.random(table.grid.shape)
    lam = 0.0
    for _ in range(iters):
        u = convolve(table, Field(table.grid, v, nonneg=True)).values * mask
        w = convolve(table, Field(table.grid, u, nonneg=True)).values
        norm = float(np.linalg.norm(w))
        if norm == 0:
            return 0.0
        lam = norm / float(np.linalg.norm(v))
        v = w / norm
    return math.sqrt(lam)
