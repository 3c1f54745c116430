"""Inequality verification: both sides of each potential-theoretic inequality on seeded
sample families, the observed constant and its drift under one grid refinement."""

import math
from enum import Enum
from typing import Callable, Optional

import logfire
import numpy as np
from pydantic import BaseModel, Field as PydanticField

from capacity import CapacityCache, CapacityProblem, SolverConfig, capacity, check_exponents, conjugate, parallel_map
from choquet import ChoquetConfig, choquet_of_power
from errors import CaptoolError, SkipBudgetError, WitnessQualityError
from families import TestFamily
from functionals import WitnessConfig, beta_objective, beta_witness_from_choquet, gamma_functional, kv_upper
from grid import AtomicMeasure, Field, Grid, GridSet, integrate, unit_ball_cover
from kernels import KernelKind, KernelSpec, cached_table, check_two_sided, convolve, convolve_measure
from maximal import local_maximal

SKIP_BUDGET = 0.10
TRUNCATION_NOTE = "Riesz potentials are computed on the truncated cube; global claims hold up to truncation"


class InequalityId(str, Enum):
    MAZYA = "mazya"
    CAPSTRONG = "capstrong"
    GFL1C = "gfl1c"
    THM12_BAND = "thm12_band"
    GAMMA_BAND = "gamma_band"
    LEMMA31_BESSEL = "lemma31_bessel"
    VWH_RIESZ = "vwh_riesz"
    THM13_MAXIMAL = "thm13_maximal"
    QUASI_ADD = "quasi_add"
    TWO_SIDED_KERNEL = "two_sided_kernel"
    MVN_CHAIN = "mvn_chain"


class SampleRatio(BaseModel):
    sample: str = PydanticField(description="Sample identifier within the family")
    lhs: float
    rhs: float
    ratio: float


class ReportParams(BaseModel):
    kind: KernelKind
    dim: int
    alpha: float
    s: float
    q: Optional[float] = None
    tol: float
    N: int
    L: float


class InequalityReport(BaseModel):
    inequality_id: InequalityId
    params: ReportParams
    per_sample: list[SampleRatio] = PydanticField(default_factory=list)
    observed_constant: float = PydanticField(description="Largest per-sample ratio")
    min_ratio: float = PydanticField(description="Smallest per-sample ratio")
    refinement: Optional[float] = PydanticField(
        default=None, description="Observed constant at 2N divided by the one at N"
    )
    refined_constant: Optional[float] = None
    skipped: list[str] = PydanticField(default_factory=list, description="Samples skipped with the reason")
    total: int
    exploratory: bool = False
    surrogate: bool = False
    notes: list[str] = PydanticField(default_factory=list)

    def enforce_skip_budget(self, budget: float = SKIP_BUDGET) -> None:
        check_skip_budget(len(self.skipped), self.total, budget)

    @property
    def drift(self) -> Optional[float]:
        return None if self.refinement is None else abs(self.refinement - 1.0)


class HarnessConfig(BaseModel):
    tol: float = PydanticField(default=1e-3, gt=0, lt=1, description="Duality gap tolerance of every capacity solve")
    levels: ChoquetConfig = PydanticField(default_factory=ChoquetConfig)
    solver: SolverConfig = PydanticField(default_factory=SolverConfig)
    jobs: Optional[int] = PydanticField(default=None, description="Sample-level worker pool size")
    max_rescale: float = PydanticField(default=100.0, gt=1)

    def choquet(self) -> ChoquetConfig:
        return self.levels.model_copy(update={"tol": self.tol})


Evaluation = Optional[tuple[float, float]]


def check_skip_budget(skipped: int, total: int, budget: float = SKIP_BUDGET) -> None:
    if total and skipped / total > budget:
        raise SkipBudgetError(skipped, total)


def _params(spec: KernelSpec, s: float, grid: Grid, cfg: HarnessConfig, q: Optional[float] = None) -> ReportParams:
    return ReportParams(kind=spec.kind, dim=spec.dim, alpha=spec.alpha, s=s, q=q, tol=cfg.tol, N=grid.N, L=grid.L)


def run_samples(inequality: InequalityId, samples: list, evaluate: Callable[[object], Evaluation],
                params: ReportParams, cfg: HarnessConfig, prefix: str = "") -> InequalityReport:
    """Evaluate (lhs, rhs) per sample; samples that cannot be evaluated are skipped with the reason."""

    def guarded(item: tuple[int, object]):
        i, sample = item
        try:
            return evaluate(sample), None
        except WitnessQualityError as exc:
            return None, f"witness quality: {exc}"
        except CaptoolError as exc:
            return None, str(exc)
        except ValueError as exc:
            return None, f"rejected: {exc}"

    with logfire.span("verify {inequality} over {count} samples", inequality=inequality.value, count=len(samples)):
        outcomes = parallel_map(guarded, list(enumerate(samples)), cfg.jobs)

    rows, skipped = [], []
    for i, (pair, reason) in enumerate(outcomes):
        name = f"{prefix}{i}"
        if pair is None or (reason is None and pair[1] == 0):
            reason = reason or "0/0"
            skipped.append(f"{name}: {reason}")
            logfire.warn("sample {name} skipped: {reason}", name=name, reason=reason)
            continue
        lhs, rhs = pair
        rows.append(SampleRatio(sample=name, lhs=lhs, rhs=rhs, ratio=lhs / rhs))

    ratios = [row.ratio for row in rows]
    report = InequalityReport(
        inequality_id=inequality,
        params=params,
        per_sample=rows,
        observed_constant=max(ratios, default=math.nan),
        min_ratio=min(ratios, default=math.nan),
        skipped=skipped,
        total=len(samples),
    )
    logfire.info("{inequality}: observed constant {constant:.4g} over {count} samples, {skips} skipped",
                 inequality=inequality.value, constant=report.observed_constant, count=len(rows), skips=len(skipped))
    return report


def _choquet_value(w: Field, spec: KernelSpec, s: float, cfg: HarnessConfig, q: float = 1.0,
                   cache: Optional[CapacityCache] = None) -> float:
    # samples already run in parallel
    return choquet_of_power(w, q, spec, s, cfg.choquet(), cfg.solver, cache, jobs=1).value


def verify_mazya(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                 cfg: Optional[HarnessConfig] = None, cache: Optional[CapacityCache] = None) -> InequalityReport:
    """int (G*f)^s dCap <= A int f^s dx."""
    cfg = cfg or HarnessConfig()
    check_exponents(spec, s)
    table = cached_table(spec, grid)

    def evaluate(f: Field) -> Evaluation:
        if f.is_zero():
            return None
        potential = convolve(table, f)
        return _choquet_value(potential, spec, s, cfg, q=s, cache=cache), integrate(f.power(s))

    return run_samples(InequalityId.MAZYA, family.realize(grid), evaluate, _params(spec, s, grid, cfg), cfg)


def verify_capstrong(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                     cfg: Optional[HarnessConfig] = None, cache: Optional[CapacityCache] = None) -> InequalityReport:
    """int G*f dCap <= A int f^s (G*f)^(1-s) dx."""
    cfg = cfg or HarnessConfig()
    check_exponents(spec, s)
    table = cached_table(spec, grid)

    def evaluate(f: Field) -> Evaluation:
        if f.is_zero():
            return None
        return _choquet_value(convolve(table, f), spec, s, cfg, cache=cache), beta_objective(f, table, s)

    return run_samples(InequalityId.CAPSTRONG, family.realize(grid), evaluate, _params(spec, s, grid, cfg), cfg)


def verify_gfl1c(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                 cfg: Optional[HarnessConfig] = None, cache: Optional[CapacityCache] = None) -> InequalityReport:
    """int G*f dCap <= A ||f||_KV, with the KV norm replaced by its candidate upper bound."""
    cfg = cfg or HarnessConfig()
    check_exponents(spec, s)
    table = cached_table(spec, grid)

    def evaluate(f: Field) -> Evaluation:
        if f.is_zero():
            return None
        return _choquet_value(convolve(table, f), spec, s, cfg, cache=cache), kv_upper(f, spec, s).value

    report = run_samples(InequalityId.GFL1C, family.realize(grid), evaluate, _params(spec, s, grid, cfg), cfg)
    report.surrogate = True
    report.notes.append("right-hand side is kv_upper, an upper bound for the KV norm")
    return report


def verify_mvn_chain(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                     cfg: Optional[HarnessConfig] = None, cache: Optional[CapacityCache] = None) -> InequalityReport:
    """Choquet(G*f) <= A KV(f) <= A int f^s (G*f)^(1-s); the ratio reported is Choquet/KV."""
    cfg = cfg or HarnessConfig()
    check_exponents(spec, s)
    table = cached_table(spec, grid)
    chain_breaks = []

    def evaluate(f: Field) -> Evaluation:
        if f.is_zero():
            return None
        kv = kv_upper(f, spec, s).value
        if kv > beta_objective(f, table, s) * (1 + 1e-12):
            chain_breaks.append(kv)
        return _choquet_value(convolve(table, f), spec, s, cfg, cache=cache), kv

    report = run_samples(InequalityId.MVN_CHAIN, family.realize(grid), evaluate, _params(spec, s, grid, cfg), cfg)
    report.surrogate = True
    report.notes.append(f"kv_upper exceeded the beta objective on {len(chain_breaks)} samples")
    return report


def verify_thm12(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                 cfg: Optional[HarnessConfig] = None, cache: Optional[CapacityCache] = None) -> InequalityReport:
    """Band of beta-witness / Choquet per sample.

    Families of sets are read as indicators, and the denominator is then Cap(E) itself.
    The lower direction goes through the witness W: Choquet(u) <= Choquet(G*W) since
    G*W >= u, and Choquet(G*W) / beta(W) is the capstrong ratio at W.
    """
    cfg = cfg or HarnessConfig()
    check_exponents(spec, s)
    table = cached_table(spec, grid)
    witness_cfg = WitnessConfig(levels=cfg.choquet(), max_rescale=cfg.max_rescale)
    lower_direction: list[float] = []
    monotone_breaks: list[float] = []

    def evaluate(sample) -> Evaluation:
        if isinstance(sample, GridSet):
            if sample.is_empty():
                return None
            u = sample.indicator()
            denominator = capacity(CapacityProblem(spec, grid, sample, s), cfg.tol, cfg.solver, cache).value
        else:
            u = sample
            if u.is_zero():
                return None
            denominator = _choquet_value(u, spec, s, cfg, cache=cache)
        witness = beta_witness_from_choquet(u, spec, s, witness_cfg, cfg.solver, cache, jobs=1)
        lifted = _choquet_value(convolve(table, witness.witness), spec, s, cfg, cache=cache)
        lower_direction.append(lifted / witness.value)
        if denominator > lifted * (1 + 2 * cfg.tol):
            monotone_breaks.append(denominator / lifted)
        return witness.value, denominator

    report = run_samples(InequalityId.THM12_BAND, family.realize(grid), evaluate, _params(spec, s, grid, cfg), cfg)
    if lower_direction:
        report.notes.append(f"Choquet(G*W)/beta(W) max {max(lower_direction):.4g} (lower direction)")
        report.notes.append(f"Choquet(u) exceeded Choquet(G*W) on {len(monotone_breaks)} samples")
    report.notes.append(f"band [{report.min_ratio:.4g}, {report.observed_constant:.4g}]")
    return report


def verify_gamma_band(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                      cfg: Optional[HarnessConfig] = None, cache: Optional[CapacityCache] = None) -> InequalityReport:
    """int |u| dCap against gamma(u); the ratio is bounded above and below, so both ends are kept."""
    cfg = cfg or HarnessConfig()
    check_exponents(spec, s)

    def evaluate(u: Field) -> Evaluation:
        if u.is_zero():
            return None
        gamma = gamma_functional(u, spec, s, cfg.tol, cfg.solver).value
        return _choquet_value(u.abs(), spec, s, cfg, cache=cache), gamma

    report = run_samples(InequalityId.GAMMA_BAND, family.realize(grid), evaluate, _params(spec, s, grid, cfg), cfg)
    report.notes.append(f"band [{report.min_ratio:.4g}, {report.observed_constant:.4g}]; "
                        f"two-sided constant {band_constant(report):.4g}")
    return report


def band_constant(report: InequalityReport) -> float:
    """Least C with 1/C <= ratio <= C on every sample."""
    if not report.per_sample:
        return math.nan
    return max(report.observed_constant, 1.0 / report.min_ratio)


def pointwise_ratio(table, f: Field, s: float) -> tuple[np.ndarray, np.ndarray]:
    """(G*f)^s and G*[f (G*f)^(s-1)] on the grid."""
    potential = convolve(table, f).values
    inner = Field(f.grid, f.values * potential ** (s - 1), nonneg=True)
    return potential**s, convolve(table, inner).values


def _sup_point(lhs: np.ndarray, rhs: np.ndarray) -> tuple[float, float, float]:
    ratio = lhs / rhs
    idx = np.unravel_index(int(np.argmax(ratio)), ratio.shape)
    return float(lhs[idx]), float(rhs[idx]), float(ratio.min())


def verify_lemma31(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                   cfg: Optional[HarnessConfig] = None) -> InequalityReport:
    """(G*f)^s <= A G*[f (G*f)^(s-1)] for f = (G*mu)^(s'-1), supp mu of diameter below 1."""
    cfg = cfg or HarnessConfig()
    if spec.kind is not KernelKind.BESSEL:
        raise ValueError("this pointwise inequality is stated for the Bessel kernel")
    check_exponents(spec, s)
    table = cached_table(spec, grid)
    minima: list[float] = []

    def evaluate(mu: AtomicMeasure) -> Evaluation:
        if mu.support_diameter >= 1:
            raise ValueError(f"support diameter {mu.support_diameter:.3f} is not below 1")
        if mu.total_mass == 0:
            return None
        f = convolve_measure(table, mu).power(conjugate(s) - 1)
        lhs, rhs, low = _sup_point(*pointwise_ratio(table, f, s))
        minima.append(low)
        return lhs, rhs

    report = run_samples(InequalityId.LEMMA31_BESSEL, family.realize(grid), evaluate,
                         _params(spec, s, grid, cfg), cfg)
    if minima:
        report.notes.append(f"smallest pointwise ratio {min(minima):.4g}; no reverse inequality is claimed")
    return report


def verify_vwh_riesz(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                     cfg: Optional[HarnessConfig] = None, contrast: Optional[KernelSpec] = None) -> InequalityReport:
    """(I*f)^s <= A I*[f (I*f)^(s-1)] for any nonnegative f.

    With ``contrast`` (a Bessel spec) the same samples are run through the Bessel
    kernel and the two observed constants are recorded side by side.
    """
    cfg = cfg or HarnessConfig()
    if spec.kind is not KernelKind.RIESZ:
        raise ValueError("this pointwise inequality is run with the Riesz kernel")
    if not spec.alpha * s <= spec.dim:
        raise ValueError(f"alpha*s = {spec.alpha * s:g} exceeds n = {spec.dim}")
    samples = family.realize(grid)

    def pointwise(kernel: KernelSpec) -> Callable[[Field], Evaluation]:
        table = cached_table(kernel, grid)

        def evaluate(f: Field) -> Evaluation:
            if f.is_zero():
                return None
            lhs, rhs, _ = _sup_point(*pointwise_ratio(table, f, s))
            return lhs, rhs

        return evaluate

    report = run_samples(InequalityId.VWH_RIESZ, samples, pointwise(spec), _params(spec, s, grid, cfg), cfg)
    report.notes.append(TRUNCATION_NOTE)
    if contrast is not None:
        paired = run_samples(InequalityId.LEMMA31_BESSEL, samples, pointwise(contrast),
                             _params(contrast, s, grid, cfg), cfg)
        report.notes.append(
            f"contrast {contrast.label}: observed constant {paired.observed_constant:.4g} "
            f"vs {report.observed_constant:.4g} for {spec.label} on the same samples"
        )
    return report


def maximal_threshold(spec: KernelSpec) -> float:
    return (spec.dim - spec.alpha) / spec.dim


def verify_thm13(family: TestFamily, spec: KernelSpec, s: float, q: float, grid: Grid,
                 cfg: Optional[HarnessConfig] = None, cache: Optional[CapacityCache] = None) -> InequalityReport:
    """int (M f)^q dCap <= A int |f|^q dCap with the local maximal function M."""
    cfg = cfg or HarnessConfig()
    check_exponents(spec, s)

    def evaluate(f: Field) -> Evaluation:
        if f.is_zero():
            return None
        lhs = _choquet_value(local_maximal(f), spec, s, cfg, q=q, cache=cache)
        return lhs, _choquet_value(f.abs(), spec, s, cfg, q=q, cache=cache)

    report = run_samples(InequalityId.THM13_MAXIMAL, family.realize(grid), evaluate,
                         _params(spec, s, grid, cfg, q=q), cfg)
    if not q > maximal_threshold(spec):
        report.exploratory = True
        report.notes.append(f"q = {q:g} is at or below (n - alpha)/n = {maximal_threshold(spec):g}; exploratory run")
    return report


def verify_quasiadd(family: TestFamily, spec: KernelSpec, s: float, grid: Grid,
                    cfg: Optional[HarnessConfig] = None, cache: Optional[CapacityCache] = None) -> InequalityReport:
    """sum_j Cap(E & B^j) <= M Cap(E) over the unit-ball cover."""
    cfg = cfg or HarnessConfig()
    check_exponents(spec, s)
    multiplicities: list[int] = []

    def evaluate(E: GridSet) -> Evaluation:
        if E.is_empty():
            return None
        cover = unit_ball_cover(grid, within=E)
        multiplicities.append(cover.multiplicity)
        problem = CapacityProblem(spec, grid, E, s)
        total = capacity(problem, cfg.tol, cfg.solver, cache).value
        pieces = [E & ball for ball in cover.balls]
        parts = sum(capacity(problem.restricted(p), cfg.tol, cfg.solver, cache).value
                    for p in pieces if not p.is_empty())
        return parts, total

    report = run_samples(InequalityId.QUASI_ADD, family.realize(grid), evaluate, _params(spec, s, grid, cfg), cfg)
    if multiplicities:
        report.notes.append(f"cover multiplicity {max(multiplicities)}")
    return report


def verify_two_sided_kernel(spec: KernelSpec, grid: Grid, cfg: Optional[HarnessConfig] = None) -> InequalityReport:
    """C1: G ~ |x|^(alpha-n) near the origin; C2: G(x) ~ G(x+y) for |x| >= 3, |y| <= 1."""
    cfg = cfg or HarnessConfig()
    bounds = check_two_sided(spec, grid)
    rows = [
        SampleRatio(sample="near", lhs=bounds.c_near, rhs=1.0, ratio=bounds.c_near),
        SampleRatio(sample="far", lhs=bounds.c_far, rhs=1.0, ratio=bounds.c_far),
    ]
    return InequalityReport(
        inequality_id=InequalityId.TWO_SIDED_KERNEL,
        params=_params(spec, 2.0, grid, cfg),
        per_sample=rows,
        observed_constant=max(bounds.c_near, bounds.c_far),
        min_ratio=min(bounds.c_near, bounds.c_far),
        total=2,
        notes=[f"near radius {bounds.near_radius:g}, far radii {bounds.far_radii}"],
    )


def with_refinement(run: Callable[[Grid], InequalityReport], grid: Grid) -> InequalityReport:
    """Run at N and 2N (same seeds) and record the ratio of the observed constants."""
    base = run(grid)
    fine = run(grid.refined())
    base.refined_constant = fine.observed_constant
    if base.observed_constant and math.isfinite(base.observed_constant):
        base.refinement = fine.observed_constant / base.observed_constant
    logfire.info("refinement N={N} -> {M}: {ratio}", N=grid.N, M=2 * grid.N, ratio=base.refinement)
    return base
