"""gamma, beta, lambda and KV functionals, the multiplier and measure norms, and the
dyadic beta witness built from capacitary measures of band/ball pieces."""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import logfire
import numpy as np
from pydantic import BaseModel, Field as PydanticField
from scipy.ndimage import correlate

from capacity import (
    CapacityCache,
    CapacityProblem,
    SolverConfig,
    capacity,
    check_exponents,
    conjugate,
    measure_potential,
    parallel_map,
    solve_dominance,
)
from choquet import ChoquetConfig
from errors import FeasibilityError, SolverConvergenceError, WitnessQualityError
from grid import AtomicMeasure, Field, GridSet, superlevel_set, unit_ball_cover
from kernels import KernelSpec, KernelTable, cached_table, convolve

MIN_DYADIC_BOX_CELLS = 4


class FunctionalKind(str, Enum):
    GAMMA = "gamma"
    BETA = "beta"
    LAMBDA_UPPER = "lambda_upper"
    KV_UPPER = "kv_upper"
    MULTIPLIER = "multiplier"
    MEASURE_NORM = "measure_norm"


@dataclass(frozen=True, eq=False)
class FunctionalValue:
    kind: FunctionalKind
    value: float
    witness: Optional[Field | AtomicMeasure] = None
    certified: bool = False
    details: dict = field(default_factory=dict)


class WitnessConfig(BaseModel):
    levels: ChoquetConfig = PydanticField(default_factory=ChoquetConfig, description="Dyadic band range and per-piece tol")
    max_rescale: float = PydanticField(default=100.0, gt=1, description="Largest acceptable rescale constant c")
    drop_factor: float = PydanticField(
        default=10.0, ge=0, description="Pieces with Cap below drop_factor * tol * (largest piece Cap) are dropped"
    )
    polish: bool = PydanticField(default=False, description="Run projected-gradient descent on the witness")
    polish_steps: int = PydanticField(default=50, ge=1, description="Polish iterations")


def beta_objective(f: Field, table: KernelTable, s: float) -> float:
    """int f^s (G*f)^(1-s) dx with 0 contributed wherever f = 0."""
    if f.is_zero():
        return 0.0
    potential = convolve(table, f.abs()).values
    a = np.abs(f.values)
    support = a > 0
    if np.any(potential[support] <= 0):
        return math.inf
    integrand = a[support] ** s * potential[support] ** (1 - s)
    return float(integrand.sum() * f.grid.cell_volume)


def _worst_shortfall(potential: np.ndarray, target: np.ndarray) -> tuple[float, tuple[int, ...]]:
    shortfall = target - potential
    idx = np.unravel_index(int(np.argmax(shortfall)), shortfall.shape)
    return float(shortfall[idx]), tuple(int(i) for i in idx)


def beta_value(u: Field, f: Field, spec: KernelSpec, s: float, rtol: float = 1e-9) -> float:
    """int f^s (G*f)^(1-s) dx for a density f with G*f >= |u| at every grid point."""
    check_exponents(spec, s)
    u.grid.require_same(f.grid)
    if np.any(f.values < 0):
        raise ValueError("beta needs a nonnegative density")
    table = cached_table(spec, u.grid)
    target = np.abs(u.values)
    potential = convolve(table, f.abs()).values
    worst, at = _worst_shortfall(potential, target)
    if worst > rtol * max(float(target.max()), 1.0):
        raise FeasibilityError(worst, at)
    return beta_objective(f, table, s)


def gamma_functional(u: Field, spec: KernelSpec, s: float, tol: float = 1e-3,
                     solver: Optional[SolverConfig] = None) -> FunctionalValue:
    """inf { int f^s : f >= 0, G*f >= |u|^(1/s) }, certified by the duality gap."""
    check_exponents(spec, s)
    rhs = u.power(1.0 / s)
    if rhs.is_zero():
        return FunctionalValue(FunctionalKind.GAMMA, 0.0, Field.zeros(u.grid), certified=True, details={"gap": 0.0})
    cfg = (solver or SolverConfig()).model_copy(update={"tol": tol})
    solution = solve_dominance(cached_table(spec, u.grid), rhs, s, cfg)
    logfire.info("gamma functional {value=:.6g} gap={gap:.2e}", value=solution.value, gap=solution.gap)
    return FunctionalValue(
        FunctionalKind.GAMMA, solution.value, solution.f, certified=True,
        details={"gap": solution.gap, "iterations": solution.iterations},
    )


def dyadic_bands(u: Field, cfg: ChoquetConfig) -> list[tuple[int, GridSet]]:
    """E_k = {2^(k-1) < u <= 2^k}; the lowest band takes every positive value below it."""
    a = np.abs(u.values)
    peak = float(a.max())
    if peak == 0:
        return []
    k_top = max(cfg.k_max, math.ceil(math.log2(peak)))
    bands = []
    for k in range(cfg.k_min, k_top + 1):
        lower = 0.0 if k == cfg.k_min else 2.0 ** (k - 1)
        mask = (a > lower) & (a <= 2.0**k)
        if mask.any():
            bands.append((k, GridSet(u.grid, mask)))
    return bands


def _rescale_to_dominate(potential: np.ndarray, target: np.ndarray) -> float:
    support = target > 0
    if not support.any():
        return 1.0
    with np.errstate(divide="ignore"):
        ratio = np.where(potential[support] > 0, target[support] / potential[support], np.inf)
    return max(1.0, float(ratio.max()))


def _polish(F: np.ndarray, target: np.ndarray, table: KernelTable, s: float, steps: int) -> tuple[np.ndarray, float]:
    """Projected gradient on f -> int f^s (G*f)^(1-s); each iterate is rescaled back to feasibility."""
    grid = table.grid

    def feasible(x: np.ndarray) -> tuple[np.ndarray, float]:
        c = _rescale_to_dominate(convolve(table, Field(grid, x, nonneg=True)).values, target)
        scaled = Field(grid, c * x, nonneg=True)
        return scaled.values, beta_objective(scaled, table, s)

    current, best = feasible(F)
    eta = 0.1 * float(current.max())
    for _ in range(steps):
        Gf = np.maximum(convolve(table, Field(grid, current, nonneg=True)).values, 1e-300)
        inner = (1 - s) * current**s * Gf ** (-s)
        grad = s * current ** (s - 1) * Gf ** (1 - s) + convolve(table, Field(grid, inner)).values
        grad /= max(float(np.abs(grad).max()), 1e-300)
        candidate, value = feasible(np.maximum(current - eta * grad, 0.0))
        if value < best:
            current, best = candidate, value
        else:
            eta *= 0.5
    return current, best


def beta_witness_from_choquet(u: Field, spec: KernelSpec, s: float, cfg: Optional[WitnessConfig] = None,
                              solver: Optional[SolverConfig] = None, cache: Optional[CapacityCache] = None,
                              jobs: Optional[int] = None) -> FunctionalValue:
    """Upper bound on beta(u) from F = max_{j,k} 2^k f_jk (G*f_jk)^(s-1), f_jk = (G*mu^{E_jk})^(s'-1).

    E_jk is the dyadic band E_k cut by the j-th ball of the unit-ball cover. F is scaled
    by the least c >= 1 with G*(cF) >= u everywhere.
    """
    cfg = cfg or WitnessConfig()
    check_exponents(spec, s)
    grid = u.grid
    target = np.abs(u.values)
    if not target.any():
        return FunctionalValue(FunctionalKind.BETA, 0.0, Field.zeros(grid), details={"rescale": 1.0, "pieces": 0})

    tol = cfg.levels.tol
    table = cached_table(spec, grid)
    pieces: list[tuple[int, int, GridSet]] = []
    for k, band in dyadic_bands(u, cfg.levels):
        cover = unit_ball_cover(grid, within=band)
        for j, ball in enumerate(cover.balls):
            piece = band & ball
            if not piece.is_empty():
                pieces.append((k, j, piece))

    def solve(item: tuple[int, int, GridSet]):
        k, j, piece = item
        try:
            return capacity(CapacityProblem(spec, grid, piece, s), tol, solver, cache)
        except SolverConvergenceError as exc:
            raise exc.with_context(f"band {k}, ball {j}") from exc

    with logfire.span("beta witness over {count} band/ball pieces", count=len(pieces)):
        results = parallel_map(solve, pieces, jobs)

    scale = max(r.value for r in results)
    floor = cfg.drop_factor * tol * scale
    F = np.zeros(grid.shape)
    dropped = 0.0
    for (k, _, _), result in zip(pieces, results):
        if result.value < floor:
            dropped += 2.0**k * result.value
            continue
        potential = np.maximum(measure_potential(table, result.mu_star).values, 1e-300)
        f_jk = potential ** (conjugate(s) - 1)
        F_jk = f_jk * result.V.values ** (s - 1)
        np.maximum(F, 2.0**k * F_jk, out=F)
    if dropped:
        logfire.warn("dropped low-capacity pieces; truncated contribution {dropped:.3e}", dropped=dropped)

    c = _rescale_to_dominate(convolve(table, Field(grid, F, nonneg=True)).values, target)
    logfire.info("beta witness rescale constant {c:.4g}", c=c)
    if c > cfg.max_rescale:
        raise WitnessQualityError(c, cfg.max_rescale)
    witness = Field(grid, c * F, nonneg=True)
    value = beta_objective(witness, table, s)
    details = {"rescale": c, "pieces": len(pieces), "dropped": dropped}
    if cfg.polish:
        polished, polished_value = _polish(witness.values, target, table, s, cfg.polish_steps)
        if polished_value < value:
            witness, value = Field(grid, polished, nonneg=True), polished_value
        details["polished"] = True
    return FunctionalValue(FunctionalKind.BETA, value, witness, details=details)


def lambda_upper(u: Field, spec: KernelSpec, s: float, cfg: Optional[WitnessConfig] = None,
                 solver: Optional[SolverConfig] = None, cache: Optional[CapacityCache] = None,
                 jobs: Optional[int] = None) -> FunctionalValue:
    """Surrogate for lambda(u): the beta witness value, which bounds the Koethe-dual norm up to a constant."""
    beta = beta_witness_from_choquet(u, spec, s, cfg, solver, cache, jobs)
    return FunctionalValue(
        FunctionalKind.LAMBDA_UPPER, beta.value, beta.witness,
        details={**beta.details, "label": "lambda-surrogate via the beta witness"},
    )


def kv_upper(f: Field, spec: KernelSpec, s: float) -> FunctionalValue:
    """min of int h^s (G*h)^(1-s) over h = |f| and mollifications of |f| raised to dominate |f|.

    The mollifiers are the kernel table cut to a ball of 1, 2 or 4 cells and normalized to unit mass.
    """
    check_exponents(spec, s)
    a = np.abs(f.values)
    if not a.any():
        return FunctionalValue(FunctionalKind.KV_UPPER, 0.0, Field.zeros(f.grid))
    table = cached_table(spec, f.grid)
    origin = f.grid.N - 1
    support = a > 0
    candidates = {"identity": a}
    for width in (1, 2, 4):
        if width > origin:
            break
        block = table.samples[(slice(origin - width, origin + width + 1),) * f.grid.dim]
        offsets = np.indices(block.shape) - width
        weights = np.where(np.sum(offsets**2, axis=0) <= width**2, block, 0.0)
        smooth = correlate(a, weights / weights.sum(), mode="constant")
        c = max(1.0, float(np.max(a[support] / np.maximum(smooth[support], 1e-300))))
        candidates[f"kernel_{width}h"] = c * smooth

    scored = {name: beta_objective(Field(f.grid, h, nonneg=True), table, s) for name, h in candidates.items()}
    best = min(scored, key=scored.get)
    logfire.debug("kv candidates {scored}", scored=scored)
    return FunctionalValue(
        FunctionalKind.KV_UPPER, scored[best], Field(f.grid, candidates[best], nonneg=True),
        details={"candidate": best, "candidates": scored},
    )


def dyadic_family(w: Field, min_cells: int = MIN_DYADIC_BOX_CELLS) -> list[GridSet]:
    """Dyadic sub-boxes with at least min_cells per axis plus superlevel sets of |w| at powers of two."""
    grid = w.grid
    family = []
    side = grid.N
    while side >= min_cells:
        per_axis = grid.N // side
        for corner in np.ndindex(*(per_axis,) * grid.dim):
            mask = np.zeros(grid.shape, dtype=bool)
            mask[tuple(slice(c * side, (c + 1) * side) for c in corner)] = True
            family.append(GridSet(grid, mask))
        side //= 2
    a = w.abs()
    peak = a.max()
    if peak > 0:
        for k in range(math.floor(math.log2(peak)), math.floor(math.log2(peak)) - 13, -1):
            E = superlevel_set(a, 2.0**k)
            if not E.is_empty():
                family.append(E)
    return family


def _family_capacities(family: list[GridSet], spec: KernelSpec, s: float, tol: float,
                       solver: Optional[SolverConfig], cache: Optional[CapacityCache],
                       jobs: Optional[int]) -> list[float]:
    def solve(K: GridSet) -> float:
        return capacity(CapacityProblem(spec, K.grid, K, s), tol, solver, cache).value

    return parallel_map(solve, family, jobs)


def multiplier_norm(f: Field, p: float, spec: KernelSpec, s: float, family: Optional[list[GridSet]] = None,
                    tol: float = 1e-3, solver: Optional[SolverConfig] = None,
                    cache: Optional[CapacityCache] = None, jobs: Optional[int] = None) -> FunctionalValue:
    """max over the family of (int_K |f|^p / Cap(K))^(1/p); a lower bound for the sup over compacts."""
    if not p > 1:
        raise ValueError(f"p must exceed 1, got {p}")
    check_exponents(spec, s)
    if f.is_zero():
        return FunctionalValue(FunctionalKind.MULTIPLIER, 0.0)
    family = dyadic_family(f) if family is None else family
    if not family:
        raise ValueError("multiplier norm needs a nonempty family of sets")
    fp = f.power(p).values
    # sets carrying no mass contribute ratio 0 and need no solve
    masses = [float(fp[K.mask].sum() * f.grid.cell_volume) for K in family]
    active = [(K, m) for K, m in zip(family, masses) if m > 0]
    caps = _family_capacities([K for K, _ in active], spec, s, tol, solver, cache, jobs)

    best, skipped, argmax = 0.0, 0, None
    for i, ((K, mass), cap) in enumerate(zip(active, caps)):
        if cap <= tol:
            skipped += 1
            continue
        ratio = (mass / cap) ** (1.0 / p)
        if ratio > best:
            best, argmax = ratio, i
    if skipped:
        logfire.warn("multiplier norm skipped {skipped} sets with capacity below {tol}", skipped=skipped, tol=tol)
    return FunctionalValue(FunctionalKind.MULTIPLIER, best, details={"family": len(family), "skipped": skipped,
                                                                     "argmax": argmax})


def measure_norm(mu: AtomicMeasure, spec: KernelSpec, s: float, family: list[GridSet], tol: float = 1e-3,
                 solver: Optional[SolverConfig] = None, cache: Optional[CapacityCache] = None,
                 jobs: Optional[int] = None) -> FunctionalValue:
    """max over the family of mu(K) / Cap(K)."""
    check_exponents(spec, s)
    if mu.total_mass == 0:
        return FunctionalValue(FunctionalKind.MEASURE_NORM, 0.0, mu)
    if not family:
        raise ValueError("measure norm needs a nonempty family of sets")
    masses = [mu.mass_in(K) for K in family]
    active = [(K, m) for K, m in zip(family, masses) if m > 0]
    caps = _family_capacities([K for K, _ in active], spec, s, tol, solver, cache, jobs)

    best, skipped = 0.0, 0
    for (K, mass), cap in zip(active, caps):
        if cap <= tol:
            skipped += 1
            continue
        best = max(best, mass / cap)
    if skipped:
        logfire.warn("measure norm skipped {skipped} sets with capacity below {tol}", skipped=skipped, tol=tol)
    return FunctionalValue(FunctionalKind.MEASURE_NORM, best, mu, details={"family": len(family), "skipped": skipped})


def capacitary_density(problem: CapacityProblem, tol: float = 1e-3, cache: Optional[CapacityCache] = None) -> Field:
    """(G*mu^E)^(s'-1), the optimal density recovered from the capacitary measure."""
    result = capacity(problem, tol, cache=cache)
    if result.value == 0:
        return Field.zeros(problem.grid)
    return measure_potential(problem.table, result.mu_star).power(conjugate(problem.s) - 1)
