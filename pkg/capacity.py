"""(alpha, s)-capacities as constrained convex programs.

The discrete program is

    min_{f >= 0} (1/s) int f^s dx   subject to   G*f >= b   on supp b,

solved by a first-order primal-dual (Chambolle-Pock) iteration in the weighted
space L^2(h^n). The dual variable is a density on supp b; multiplied by the cell
volume it gives the cell masses of the extremal measure mu, and at optimality
f = (G*mu)^(s'-1). Reported values use the int f^s normalization.
"""

import hashlib
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import logfire
import numpy as np
from pydantic import BaseModel, Field as PydanticField
from scipy.optimize.elementwise import find_root

from errors import SolverConvergenceError
from grid import Field, Grid, GridSet, integrate
from kernels import KernelKind, KernelSpec, KernelTable, cached_table, convolve, power_method_norm
from settings import get_settings

POWER_FLOOR = 1e-300


class SolverConfig(BaseModel):
    tol: float = PydanticField(default=1e-3, gt=0, lt=1, description="Relative duality gap at which a solve stops")
    max_iters: int = PydanticField(default=20000, ge=1, description="Iteration cap before reporting non-convergence")
    check_every: int = PydanticField(default=10, ge=1, description="Iterations between duality gap evaluations")
    seed: int = PydanticField(default=0, description="Seed of the power-method start vector")
    power_iters: int = PydanticField(default=40, ge=1, description="Power-method iterations for the operator norm")
    potential_slack: float = PydanticField(
        default=5.0, ge=0,
        description="A solve also waits until the dual potential reaches (1 - potential_slack * tol) of the target",
    )


def conjugate(s: float) -> float:
    return s / (s - 1.0)


def check_exponents(spec: KernelSpec, s: float) -> None:
    if not s > 1:
        raise ValueError(f"exponent s must exceed 1, got {s}")
    if spec.kind is KernelKind.BESSEL and spec.alpha * s > spec.dim:
        raise ValueError(
            f"alpha*s = {spec.alpha * s:g} exceeds n = {spec.dim}; "
            "needs alpha>0 and s>1 be such that alpha*s <= n"
        )


@dataclass(frozen=True, eq=False)
class CapacityProblem:
    spec: KernelSpec
    grid: Grid
    E: GridSet
    s: float

    def __post_init__(self):
        self.grid.require_same(self.E.grid)
        if self.spec.dim != self.grid.dim:
            raise ValueError("kernel and grid dimensions differ")
        check_exponents(self.spec, self.s)

    @property
    def table(self) -> KernelTable:
        return cached_table(self.spec, self.grid)

    def restricted(self, E: GridSet) -> "CapacityProblem":
        return CapacityProblem(self.spec, self.grid, E, self.s)


@dataclass(frozen=True, eq=False)
class DominanceSolution:
    f: Field
    masses: Field
    value: float
    gap: float
    iterations: int


@dataclass(frozen=True, eq=False)
class CapacityResult:
    value: float
    f_star: Field
    mu_star: Field
    V: Field
    gap: float
    iterations: int


@dataclass(frozen=True, eq=False)
class CapacitaryMeasure:
    mu: Field
    V: Field
    identities: tuple[float, float, float]
    min_V: float


def _prox_power(v: np.ndarray, tau: float, s: float) -> np.ndarray:
    """argmin_x>=0 (1/s) x^s + (x - v)^2 / (2 tau), elementwise."""
    if s == 2.0:
        return np.maximum(v, 0.0) / (1.0 + tau)
    out = np.zeros_like(v)
    pos = v > 0
    if np.any(pos):
        vp = v[pos]
        res = find_root(lambda x, c: tau * x ** (s - 1) + x - c, (np.zeros_like(vp), vp), args=(vp,))
        out[pos] = res.x
    return out


def solve_dominance(table: KernelTable, rhs: Field, s: float, cfg: SolverConfig) -> DominanceSolution:
    """Minimize int f^s over f >= 0 with G*f >= rhs wherever rhs > 0."""
    grid = table.grid
    grid.require_same(rhs.grid)
    w = grid.cell_volume
    mask = rhs.values > 0
    b = np.where(mask, rhs.values, 0.0)
    if not mask.any():
        zero = Field.zeros(grid)
        return DominanceSolution(zero, zero, 0.0, 0.0, 0)

    def K(x: np.ndarray) -> np.ndarray:
        return convolve(table, Field(grid, x, nonneg=True)).values

    norm = power_method_norm(table, mask, cfg.power_iters, cfg.seed)
    tau = sigma = 0.95 / norm
    accelerate = s == 2.0
    sp = conjugate(s)

    f = np.zeros(grid.shape)
    f_bar = f.copy()
    rho = np.zeros(grid.shape)
    gap = math.inf
    dominance = -math.inf
    best: Optional[tuple] = None

    with logfire.span("dominance solve s={s} cells={cells}", s=s, cells=int(mask.sum())):
        for it in range(1, cfg.max_iters + 1):
            rho = np.maximum(rho + sigma * (b - K(f_bar)), 0.0) * mask
            phi = K(rho)
            f_new = _prox_power(f + tau * phi, tau, s)
            theta = 1.0
            if accelerate:
                theta = 1.0 / math.sqrt(1.0 + 2.0 * tau)
                tau *= theta
                sigma /= theta
            f_bar = f_new + theta * (f_new - f)
            f = f_new

            if it % cfg.check_every and it != cfg.max_iters:
                continue
            Kf = K(f)
            if np.any(Kf[mask] <= 0):
                continue
            scale_p = float(np.max(b[mask] / Kf[mask]))
            primal = scale_p**s * float(np.sum(f**s)) * w
            mass = float(np.sum(b * rho)) * w
            energy = float(np.sum(phi**sp)) * w
            if mass <= 0 or energy <= 0:
                continue
            dual = mass**s / energy ** (s - 1)
            gap = max(primal - dual, 0.0) / primal
            scale_d = (mass / energy) ** (s - 1)
            best = (scale_p * f, scale_d * w * rho, primal, gap, it)
            if gap > cfg.tol:
                continue
            # V = G*((G*mu)^(s'-1)) of the rescaled dual measure must dominate the target too
            V = K(np.maximum(scale_d * phi, POWER_FLOOR) ** (sp - 1))
            dominance = float(np.min(V[mask] / b[mask]))
            if dominance >= 1.0 - cfg.potential_slack * cfg.tol:
                break
        else:
            if gap <= cfg.tol:
                logfire.warn("gap {gap:.2e} reached but dual potential only {dominance:.5f} of the target",
                             gap=gap, dominance=dominance)
            raise SolverConvergenceError(gap, cfg.max_iters)

    f_star, masses, value, gap, iterations = best
    logfire.debug("dominance solve converged {value=} {gap=} {iterations=}",
                  value=value, gap=gap, iterations=iterations)
    return DominanceSolution(Field(grid, f_star, nonneg=True), Field(grid, masses, nonneg=True), value, gap, iterations)


def measure_potential(table: KernelTable, masses: Field) -> Field:
    """G*mu on the grid for mu = sum of cell masses at cell centres."""
    return convolve(table, masses.scaled(1.0 / masses.grid.cell_volume))


def nonlinear_potential(table: KernelTable, masses: Field, s: float) -> Field:
    """V = G*((G*mu)^(s'-1))."""
    base = np.maximum(measure_potential(table, masses).values, POWER_FLOOR)
    return convolve(table, Field(table.grid, base ** (conjugate(s) - 1), nonneg=True))


class CapacityCache:
    """Thread-safe insert-or-get store of capacity results, optionally backed by .npz files."""

    def __init__(self, cache_dir: Optional[str | Path] = None):
        self._lock = threading.Lock()
        self._entries: dict[str, CapacityResult] = {}
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(problem: CapacityProblem, tol: float) -> str:
        ident = f"{problem.E.digest()}|{problem.spec.model_dump_json()}|{problem.s!r}|{tol!r}"
        return hashlib.sha256(ident.encode()).hexdigest()

    def _load(self, key: str, grid: Grid) -> Optional[CapacityResult]:
        if not self.cache_dir:
            return None
        path = self.cache_dir / f"{key}.npz"
        if not path.exists():
            return None
        with np.load(path) as data:
            return CapacityResult(
                value=float(data["value"]),
                f_star=Field(grid, data["f_star"], nonneg=True),
                mu_star=Field(grid, data["mu_star"], nonneg=True),
                V=Field(grid, data["V"], nonneg=True),
                gap=float(data["gap"]),
                iterations=int(data["iterations"]),
            )

    def _store(self, key: str, result: CapacityResult) -> None:
        if not self.cache_dir:
            return
        np.savez(
            self.cache_dir / f"{key}.npz",
            value=result.value, f_star=result.f_star.values, mu_star=result.mu_star.values,
            V=result.V.values, gap=result.gap, iterations=result.iterations,
        )

    def get_or_compute(self, problem: CapacityProblem, tol: float,
                       compute: Callable[[], CapacityResult]) -> CapacityResult:
        key = self.key(problem, tol)
        with self._lock:
            hit = self._entries.get(key)
        if hit is None:
            hit = self._load(key, problem.grid)
        if hit is not None:
            with self._lock:
                return self._entries.setdefault(key, hit)
        result = compute()
        with self._lock:
            stored = self._entries.setdefault(key, result)
        if stored is result:
            self._store(key, result)
        return stored

    def __len__(self) -> int:
        return len(self._entries)


_default_cache: Optional[CapacityCache] = None
_default_lock = threading.Lock()


def default_cache() -> CapacityCache:
    global _default_cache
    with _default_lock:
        if _default_cache is None:
            _default_cache = CapacityCache(get_settings().cache_dir)
        return _default_cache


def _solve_capacity(problem: CapacityProblem, cfg: SolverConfig) -> CapacityResult:
    grid = problem.grid
    if problem.E.is_empty():
        zero = Field.zeros(grid)
        return CapacityResult(0.0, zero, zero, zero, 0.0, 0)
    table = problem.table
    solution = solve_dominance(table, problem.E.indicator(), problem.s, cfg)
    V = nonlinear_potential(table, solution.masses, problem.s)
    logfire.info("capacity {kernel} s={s} cells={cells}: {value=:.6g} gap={gap:.2e} iterations={iterations}",
                 kernel=problem.spec.label, s=problem.s, cells=problem.E.count,
                 value=solution.value, gap=solution.gap, iterations=solution.iterations)
    return CapacityResult(solution.value, solution.f, solution.masses, V, solution.gap, solution.iterations)


def capacity(problem: CapacityProblem, tol: float = 1e-3, cfg: Optional[SolverConfig] = None,
             cache: Optional[CapacityCache] = None) -> CapacityResult:
    """Cap_{alpha,s}(E) (cap_{alpha,s}(E) for a Riesz spec) to relative duality gap tol."""
    cfg = (cfg or SolverConfig()).model_copy(update={"tol": tol})
    cache = cache if cache is not None else default_cache()
    return cache.get_or_compute(problem, tol, lambda: _solve_capacity(problem, cfg))


def capacitary_measure(problem: CapacityProblem, tol: float = 1e-3, cfg: Optional[SolverConfig] = None,
                       cache: Optional[CapacityCache] = None) -> CapacitaryMeasure:
    result = capacity(problem, tol, cfg, cache)
    if result.value == 0:
        return CapacitaryMeasure(result.mu_star, result.V, (1.0, 1.0, 1.0), math.inf)
    table = problem.table
    mu = result.mu_star
    potential = measure_potential(table, mu)
    total = float(mu.values.sum())
    paired = float(np.sum(result.V.values * mu.values))
    energy = integrate(potential.power(conjugate(problem.s)))
    identities = (total / result.value, paired / result.value, energy / result.value)
    min_V = float(result.V.values[problem.E.mask].min())
    logfire.info("capacitary identities {identities} min V on E {min_V:.5f}", identities=identities, min_V=min_V)
    return CapacitaryMeasure(mu, result.V, identities, min_V)


def parallel_map(fn, items: list, jobs: Optional[int] = None) -> list:
    """fn over items on a thread pool; results in submission order."""
    jobs = jobs or get_settings().jobs
    if jobs <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def quasi_additivity_ratio(problem: CapacityProblem, cover: list[GridSet], tol: float = 1e-3,
                           cfg: Optional[SolverConfig] = None, cache: Optional[CapacityCache] = None,
                           jobs: Optional[int] = None) -> float:
    """[sum_j Cap(E & B^j)] / Cap(E)."""
    total = capacity(problem, tol, cfg, cache).value
    if total <= 0:
        raise ValueError("quasi-additivity needs Cap(E) > 0")
    pieces = [(j, problem.E & ball) for j, ball in enumerate(cover)]
    pieces = [(j, piece) for j, piece in pieces if not piece.is_empty()]

    def solve(item):
        j, piece = item
        try:
            return capacity(problem.restricted(piece), tol, cfg, cache).value
        except SolverConvergenceError as exc:
            raise exc.with_context(f"ball {j}") from exc

    parts = parallel_map(solve, pieces, jobs)
    ratio = sum(parts) / total
    logfire.info("quasi-additivity ratio {ratio:.4f} over {balls} balls", ratio=ratio, balls=len(parts))
    return ratio


def scaling_exponent(small: CapacityProblem, large: CapacityProblem, factor: float = 2.0,
                     tol: float = 1e-3, cache: Optional[CapacityCache] = None) -> float:
    """log_factor[cap(large)/cap(small)]; for Riesz and large = factor*small this is n - alpha*s."""
    a = capacity(small, tol, cache=cache).value
    b = capacity(large, tol, cache=cache).value
    return math.log(b / a) / math.log(factor)


def riesz_scaling_exponent(problem: CapacityProblem, factor: float = 2.0, tol: float = 1e-3,
                           cache: Optional[CapacityCache] = None) -> float:
    """Observed exponent of cap(factor*E) / cap(E); the Riesz scaling law predicts n - alpha*s."""
    if problem.spec.kind is not KernelKind.RIESZ:
        raise ValueError("the scaling law holds for the Riesz capacity only")
    return scaling_exponent(problem, problem.restricted(problem.E.dilated(factor)), factor, tol, cache)


def subadditivity_ratio(problem: CapacityProblem, first: GridSet, second: GridSet, tol: float = 1e-3,
                        cache: Optional[CapacityCache] = None) -> float:
    """Cap(E1 | E2) / (Cap(E1) + Cap(E2)); at most 1 up to solver slack."""
    parts = sum(capacity(problem.restricted(part), tol, cache=cache).value for part in (first, second))
    if parts == 0:
        return 0.0
    return capacity(problem.restricted(first | second), tol, cache=cache).value / parts
