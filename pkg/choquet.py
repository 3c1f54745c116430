"""Choquet integrals against Cap_{alpha,s} by layer-cake sums over dyadic levels."""

from dataclasses import dataclass
from typing import Optional

import logfire
import numpy as np
from pydantic import BaseModel, Field as PydanticField, model_validator

from capacity import CapacityCache, CapacityProblem, SolverConfig, capacity, parallel_map
from errors import SolverConvergenceError
from grid import Field, GridSet, superlevel_set
from kernels import KernelSpec


class ChoquetConfig(BaseModel):
    k_min: int = PydanticField(default=-12, description="Lowest level exponent, t = 2^k_min")
    k_max: int = PydanticField(default=6, description="Highest level exponent, t = 2^k_max")
    tol: float = PydanticField(default=1e-3, gt=0, lt=1, description="Duality gap tolerance of every level solve")
    levels_per_octave: int = PydanticField(default=1, ge=1, description="Levels between consecutive powers of two")

    @model_validator(mode="after")
    def _ordered(self) -> "ChoquetConfig":
        if not self.k_min < self.k_max:
            raise ValueError(f"k_min must be below k_max, got {self.k_min} and {self.k_max}")
        return self

    def levels(self) -> np.ndarray:
        """t_j = 2^(j/m) for j = m*k_min, ..., m*k_max."""
        m = self.levels_per_octave
        return 2.0 ** (np.arange(m * self.k_min, m * self.k_max + 1) / m)


@dataclass(frozen=True)
class ChoquetResult:
    value: float
    per_level: list[tuple[float, float]]
    truncation_bounds: tuple[float, float]

    @property
    def lower(self) -> float:
        return self.truncation_bounds[0]

    @property
    def upper(self) -> float:
        return self.truncation_bounds[1]

    def brackets(self, target: float, rel: float = 0.0) -> bool:
        lo, hi = self.truncation_bounds
        return lo * (1 - rel) <= target <= hi * (1 + rel)


def choquet_integral(w: Field, spec: KernelSpec, s: float, cfg: Optional[ChoquetConfig] = None,
                     solver: Optional[SolverConfig] = None, cache: Optional[CapacityCache] = None,
                     jobs: Optional[int] = None) -> ChoquetResult:
    """Lower and upper layer-cake sums of int_0^inf Cap({w > t}) dt over cfg's level range."""
    cfg = cfg or ChoquetConfig()
    if np.any(w.values < 0):
        raise ValueError("Choquet integrand must be nonnegative")
    t = cfg.levels()
    sets = [superlevel_set(w, level) for level in t]
    # Cap({w > t}) decreases in t with left limit Cap({w >= t}); the closed sets give the lower sum
    closed = [superlevel_set(w, level, closed=True) for level in t[1:]]

    # superlevel sets repeat across levels; solve each distinct one once
    unique: dict[str, tuple[int, GridSet]] = {}
    for k, E in [*enumerate(sets), *enumerate(closed, start=1)]:
        if not E.is_empty():
            unique.setdefault(E.digest(), (k, E))

    def solve(item: tuple[int, GridSet]) -> float:
        k, E = item
        try:
            return capacity(CapacityProblem(spec, w.grid, E, s), cfg.tol, solver, cache).value
        except SolverConvergenceError as exc:
            raise exc.with_context(f"level {k} (t={t[k]:.4g})") from exc

    with logfire.span("choquet integral {kernel} s={s} levels={levels}", kernel=spec.label, s=s, levels=len(t)):
        solved = dict(zip(unique, parallel_map(solve, list(unique.values()), jobs)))
    caps = np.array([0.0 if E.is_empty() else solved[E.digest()] for E in sets])
    closed_caps = np.array([0.0 if E.is_empty() else solved[E.digest()] for E in closed])

    steps = np.diff(t)
    lower = float(np.sum(steps * closed_caps))
    upper = float(np.sum(steps * caps[:-1]))
    per_level = [(float(level), float(c)) for level, c in zip(t, caps)]

    drops = caps[1:] - caps[:-1] * (1 + 2 * cfg.tol)
    if np.any(drops > 0):
        logfire.warn("capacity increases with the level at {count} steps beyond solver slack",
                     count=int((drops > 0).sum()))
    logfire.info("choquet bracket [{lower:.6g}, {upper:.6g}]", lower=lower, upper=upper)
    return ChoquetResult(lower, per_level, (lower, upper))


def choquet_of_power(w: Field, q: float, spec: KernelSpec, s: float, cfg: Optional[ChoquetConfig] = None,
                     solver: Optional[SolverConfig] = None, cache: Optional[CapacityCache] = None,
                     jobs: Optional[int] = None) -> ChoquetResult:
    """Choquet integral of w^q."""
    if not q > 0:
        raise ValueError(f"power q must be positive, got {q}")
    if np.any(w.values < 0):
        raise ValueError("Choquet integrand must be nonnegative")
    return choquet_integral(w.power(q), spec, s, cfg, solver, cache, jobs)
