import argparse
import math
import sys
from datetime import datetime, timezone
from typing import Any, Optional

import logfire

import storage
from capacity import CapacityCache, CapacityProblem, SolverConfig, capacitary_measure, capacity
from choquet import ChoquetConfig, choquet_integral, choquet_of_power
from errors import CaptoolError, ConfigError
from families import atomic_measures, bump_sums, far_bumps, family_for, set_unions
from functionals import (
    WitnessConfig,
    beta_witness_from_choquet,
    dyadic_family,
    gamma_functional,
    kv_upper,
    lambda_upper,
    measure_norm,
    multiplier_norm,
)
from grid import AtomicMeasure, Field
from harness import (
    HarnessConfig,
    InequalityId,
    InequalityReport,
    check_skip_budget,
    verify_capstrong,
    verify_gamma_band,
    verify_gfl1c,
    verify_lemma31,
    verify_mazya,
    verify_mvn_chain,
    verify_quasiadd,
    verify_thm12,
    verify_thm13,
    verify_two_sided_kernel,
    verify_vwh_riesz,
    with_refinement,
)
from kernels import KernelKind, KernelSpec, bessel_value, check_two_sided, riesz_value
from maximal import BOUNDARY_POLICY, RadiusSet, global_maximal, local_maximal, potential_maximal_domination
from schemas import (
    CapacitySummary,
    ChoquetSummary,
    ExperimentConfig,
    FunctionalSummary,
    GoldenCheck,
    KernelCheckSummary,
    MaximalSummary,
    Mode,
    OutputFormat,
    load_config,
    parse_config,
    parse_radii,
    parse_set,
)
from settings import configure_logging, get_settings


def _solver(cfg: ExperimentConfig) -> SolverConfig:
    return SolverConfig(tol=cfg.solver.tol, max_iters=cfg.solver.max_iters, seed=cfg.solver.seed)


def _levels(cfg: ExperimentConfig) -> ChoquetConfig:
    return ChoquetConfig(k_min=cfg.levels.k_min, k_max=cfg.levels.k_max, tol=cfg.solver.tol,
                         levels_per_octave=cfg.levels.levels_per_octave)


def _cache() -> CapacityCache:
    root = get_settings().cache_dir
    if root is None and storage.ArtifactStore.root is not None:
        root = storage.cache_dir()
    return CapacityCache(root)


def _input_field(cfg: ExperimentConfig) -> Field:
    grid = cfg.build_grid()
    if cfg.io.field:
        f = storage.load_field(cfg.io.field)
        grid.require_same(f.grid)
        return f
    return parse_set(cfg.task.set, grid).indicator()


def run_capacity(cfg: ExperimentConfig, cache: CapacityCache) -> tuple[dict, list[dict]]:
    grid = cfg.build_grid()
    problem = CapacityProblem(cfg.kernel_spec(), grid, parse_set(cfg.task.set, grid), cfg.task.s)
    result = capacity(problem, cfg.solver.tol, _solver(cfg), cache)
    extremal = capacitary_measure(problem, cfg.solver.tol, _solver(cfg), cache)
    if cfg.io.field_out:
        storage.save_field(cfg.io.field_out, result.f_star)
    summary = CapacitySummary(
        value=result.value, gap=result.gap, iterations=result.iterations, cells=problem.E.count,
        measure=problem.E.measure(), identities=extremal.identities,
        min_V=extremal.min_V if math.isfinite(extremal.min_V) else 0.0,
    )
    return summary.model_dump(mode="json"), [summary.model_dump(mode="json", exclude={"identities"})]


def run_choquet(cfg: ExperimentConfig, cache: CapacityCache) -> tuple[dict, list[dict]]:
    w = storage.load_field(cfg.io.field)
    spec, q = cfg.kernel_spec(), cfg.task.q
    if q is None:
        result = choquet_integral(w, spec, cfg.task.s, _levels(cfg), _solver(cfg), cache, cfg.task.jobs)
    else:
        result = choquet_of_power(w, q, spec, cfg.task.s, _levels(cfg), _solver(cfg), cache, cfg.task.jobs)
    summary = ChoquetSummary(value=result.value, lower=result.lower, upper=result.upper, q=q or 1.0,
                             per_level=result.per_level)
    rows = [{"level": t, "capacity": c} for t, c in result.per_level]
    return summary.model_dump(mode="json"), rows


def run_functional(cfg: ExperimentConfig, cache: CapacityCache) -> tuple[dict, list[dict]]:
    spec, s, tol, which = cfg.kernel_spec(), cfg.task.s, cfg.solver.tol, cfg.task.which
    witness_cfg = WitnessConfig(levels=_levels(cfg), polish=cfg.task.polish)
    jobs = cfg.task.jobs
    label = None
    if which == "gamma":
        value = gamma_functional(_input_field(cfg), spec, s, tol, _solver(cfg))
    elif which == "beta":
        value = beta_witness_from_choquet(_input_field(cfg), spec, s, witness_cfg, _solver(cfg), cache, jobs)
    elif which == "lambda":
        value = lambda_upper(_input_field(cfg), spec, s, witness_cfg, _solver(cfg), cache, jobs)
        label = value.details.get("label")
    elif which == "kv":
        value = kv_upper(_input_field(cfg), spec, s)
    elif which == "mult":
        value = multiplier_norm(_input_field(cfg), cfg.task.p, spec, s, None, tol, _solver(cfg), cache, jobs)
    else:
        grid = cfg.build_grid()
        E = parse_set(cfg.task.set, grid)
        extremal = capacitary_measure(CapacityProblem(spec, grid, E, s), tol, _solver(cfg), cache)
        mu = AtomicMeasure.from_cell_masses(extremal.mu)
        value = measure_norm(mu, spec, s, dyadic_family(E.indicator()) + [E], tol, _solver(cfg), cache, jobs)

    witness_path = None
    if cfg.io.field_out and isinstance(value.witness, Field):
        witness_path = str(storage.save_field(cfg.io.field_out, value.witness))
    details = {k: v for k, v in value.details.items() if k != "label"}
    summary = FunctionalSummary(kind=value.kind.value, value=value.value, certified=value.certified, label=label,
                                details=details, witness_path=witness_path)
    row = {"kind": summary.kind, "value": summary.value, "certified": summary.certified}
    return summary.model_dump(mode="json"), [row]


def run_maximal(cfg: ExperimentConfig, cache: CapacityCache) -> tuple[dict, list[dict]]:
    f = storage.load_field(cfg.io.field)
    spec = cfg.kernel_spec()
    radii_list = parse_radii(cfg.task.radii)
    if cfg.task.global_radii:
        radii = RadiusSet.global_radii(f.grid)
        out = global_maximal(f, spec)
    else:
        try:
            radii = (RadiusSet(tuple(radii_list)) if radii_list else RadiusSet.auto(f.grid)).check(f.grid)
        except ValueError as exc:
            raise ConfigError(f"task.radii: {exc}") from exc
        out = local_maximal(f, radii)
    ratio = None
    if cfg.task.q is not None:
        ratio = potential_maximal_domination(f.abs(), cfg.task.q, spec, cfg.task.s, radii, cfg.task.global_radii)
    path = str(storage.save_field(cfg.io.field_out, out)) if cfg.io.field_out else None
    summary = MaximalSummary(radii=list(radii.radii), max_value=out.max(), boundary_policy=BOUNDARY_POLICY,
                             domination_ratio=ratio, field_path=path)
    return summary.model_dump(mode="json"), [{"max_value": summary.max_value, "domination_ratio": ratio}]


def _default_family(cfg: ExperimentConfig, which: InequalityId):
    t, dim = cfg.task, cfg.kernel.dim
    seed = cfg.solver.seed
    if t.family:
        return family_for(t.family, dim, t.samples, seed, cfg.kernel_spec(), t.s)
    if which is InequalityId.LEMMA31_BESSEL:
        return atomic_measures(dim, t.samples, seed)
    if which is InequalityId.QUASI_ADD:
        return set_unions(dim, t.samples, seed)
    if which is InequalityId.VWH_RIESZ and t.contrast:
        return far_bumps(dim, t.samples, seed)
    return bump_sums(dim, t.samples, seed)


def run_verify(cfg: ExperimentConfig, cache: CapacityCache) -> tuple[dict, list[dict]]:
    which = InequalityId(cfg.task.which)
    spec, s, grid = cfg.kernel_spec(), cfg.task.s, cfg.build_grid()
    hcfg = HarnessConfig(tol=cfg.solver.tol, levels=_levels(cfg), solver=_solver(cfg), jobs=cfg.task.jobs)
    family = None if which is InequalityId.TWO_SIDED_KERNEL else _default_family(cfg, which)
    contrast = None
    if cfg.task.contrast and which is InequalityId.VWH_RIESZ:
        contrast = KernelSpec(kind=KernelKind.BESSEL, alpha=spec.alpha, dim=spec.dim)

    runners = {
        InequalityId.MAZYA: lambda g: verify_mazya(family, spec, s, g, hcfg, cache),
        InequalityId.CAPSTRONG: lambda g: verify_capstrong(family, spec, s, g, hcfg, cache),
        InequalityId.GFL1C: lambda g: verify_gfl1c(family, spec, s, g, hcfg, cache),
        InequalityId.MVN_CHAIN: lambda g: verify_mvn_chain(family, spec, s, g, hcfg, cache),
        InequalityId.THM12_BAND: lambda g: verify_thm12(family, spec, s, g, hcfg, cache),
        InequalityId.GAMMA_BAND: lambda g: verify_gamma_band(family, spec, s, g, hcfg, cache),
        InequalityId.LEMMA31_BESSEL: lambda g: verify_lemma31(family, spec, s, g, hcfg),
        InequalityId.VWH_RIESZ: lambda g: verify_vwh_riesz(family, spec, s, g, hcfg, contrast),
        InequalityId.THM13_MAXIMAL: lambda g: verify_thm13(family, spec, s, cfg.task.q, g, hcfg, cache),
        InequalityId.QUASI_ADD: lambda g: verify_quasiadd(family, spec, s, g, hcfg, cache),
        InequalityId.TWO_SIDED_KERNEL: lambda g: verify_two_sided_kernel(spec, g, hcfg),
    }
    run = runners[which]
    report: InequalityReport = with_refinement(run, grid) if cfg.task.refine else run(grid)
    if cfg.io.histogram:
        storage.save_histogram(cfg.io.histogram, [row.ratio for row in report.per_sample])
    rows = [row.model_dump(mode="json") for row in report.per_sample]
    return report.model_dump(mode="json"), rows


GOLDEN_POINTS = (0.5, 1.0, 2.0)


def run_kernel_check(cfg: ExperimentConfig, cache: CapacityCache) -> tuple[dict, list[dict]]:
    checks = []
    bessel = KernelSpec(kind=KernelKind.BESSEL, alpha=2.0, dim=1)
    for r in GOLDEN_POINTS:
        expected = math.exp(-r) / 2
        checks.append(_golden(f"G_2 n=1 at {r:g}", expected, bessel_value(bessel, [r]), 1e-7))
    riesz = KernelSpec(kind=KernelKind.RIESZ, alpha=2.0, dim=3)
    for r in GOLDEN_POINTS:
        expected = 1 / (4 * math.pi * r)
        checks.append(_golden(f"I_2 n=3 at {r:g}", expected, riesz_value(riesz, [r, 0.0, 0.0]), 1e-12))
    summary = KernelCheckSummary(golden=checks)
    spec = cfg.kernel_spec()
    if spec.kind is KernelKind.BESSEL:
        bounds = check_two_sided(spec, cfg.build_grid())
        summary.c_near, summary.c_far = bounds.c_near, bounds.c_far
    rows = [check.model_dump(mode="json") for check in checks]
    return summary.model_dump(mode="json"), rows


def _golden(name: str, expected: float, observed: float, rtol: float) -> GoldenCheck:
    err = abs(observed - expected) / abs(expected)
    return GoldenCheck(name=name, expected=expected, observed=observed, rel_error=err, passed=bool(err <= rtol))


RUNNERS = {
    Mode.CAPACITY: run_capacity,
    Mode.CHOQUET: run_choquet,
    Mode.FUNCTIONAL: run_functional,
    Mode.MAXIMAL: run_maximal,
    Mode.VERIFY: run_verify,
    Mode.KERNEL_CHECK: run_kernel_check,
}


def run(cfg: ExperimentConfig) -> int:
    """Execute one validated experiment, write its report, return the exit status."""
    cfg.validated()
    started = datetime.now(timezone.utc)
    if cfg.io.store:
        storage.ArtifactStore.open_store(cfg.io.store)
    try:
        with logfire.span("captool {mode}", mode=cfg.mode.value):
            result, rows = RUNNERS[cfg.mode](cfg, _cache())
        payload = {
            "schema_version": cfg.schema_version,
            "mode": cfg.mode.value,
            "config": cfg.model_dump(mode="json"),
            "result": result,
        }
        envelope = storage.build_envelope(payload, started)
        if cfg.io.out:
            storage.save_report(cfg.io.out, envelope)
            if cfg.io.format is OutputFormat.CSV:
                storage.save_rows_csv(_csv_name(cfg.io.out), rows)
        else:
            print(envelope.model_dump_json(indent=2))
    finally:
        storage.ArtifactStore.close_store()

    if cfg.mode is Mode.VERIFY:
        check_skip_budget(len(result["skipped"]), result["total"])
    if cfg.mode is Mode.KERNEL_CHECK and not all(check["passed"] for check in result["golden"]):
        return 1
    return 0


def _csv_name(report_path: str) -> str:
    return report_path[: -len(".json")] + ".csv" if report_path.endswith(".json") else report_path + ".csv"


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="JSON experiment config; flags override it")
    p.add_argument("--kind", choices=[k.value for k in KernelKind], default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--dim", type=int, default=None)
    p.add_argument("--n", dest="points_per_axis", type=int, default=None, help="Grid points per axis (power of two)")
    p.add_argument("--half-extent", type=float, default=None, help="Grid half width L")
    p.add_argument("--s", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    p.add_argument("--max-iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--levels", type=str, default=None, help="k_min:k_max dyadic level exponents")
    p.add_argument("--levels-per-octave", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--format", choices=[f.value for f in OutputFormat], default=None)
    p.add_argument("--field-out", type=str, default=None)
    p.add_argument("--store", type=str, default=None, help="Artifact store root")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="captool", description="Numerical (alpha, s)-capacities and inequalities")
    sub = parser.add_subparsers(dest="mode", required=True)

    p = sub.add_parser("capacity", help="Cap_{alpha,s}(E) with its capacitary measure")
    _add_common(p)
    p.add_argument("--set", type=str, default=None, help="e.g. box:0,1 or ball:0,0,0.5 joined by '+'")

    p = sub.add_parser("choquet", help="Choquet integral of a field against the capacity")
    _add_common(p)
    p.add_argument("--field", type=str, default=None)
    p.add_argument("--q", type=float, default=None, help="Integrate the q-th power of the field")

    p = sub.add_parser("functional", help="gamma, beta, lambda, KV, multiplier or measure norm")
    _add_common(p)
    p.add_argument("--which", type=str, default=None)
    p.add_argument("--field", type=str, default=None)
    p.add_argument("--set", type=str, default=None)
    p.add_argument("--p", type=float, default=None)
    p.add_argument("--polish", action="store_true", default=None)

    p = sub.add_parser("maximal", help="Local maximal function of a field")
    _add_common(p)
    p.add_argument("--field", type=str, default=None)
    p.add_argument("--radii", type=str, default=None, help="'auto' or comma-separated radii")
    p.add_argument("--global-radii", action="store_true", default=None)
    p.add_argument("--q", type=float, default=None, help="Also report the potential domination ratio at q")

    p = sub.add_parser("verify", help="Run an inequality harness")
    _add_common(p)
    p.add_argument("--which", type=str, default=None)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--family", type=str, default=None)
    p.add_argument("--refine", action="store_true", default=None)
    p.add_argument("--contrast", action="store_true", default=None)
    p.add_argument("--histogram", type=str, default=None)

    p = sub.add_parser("kernel-check", help="Kernel golden values and two-sided bounds")
    _add_common(p)
    return parser


_SECTIONS = {
    "kernel": ("kind", "alpha", "dim"),
    "grid": ("points_per_axis", "half_extent"),
    "solver": ("tol", "max_iters", "seed"),
    "levels": ("levels_per_octave",),
    "task": ("s", "set", "which", "q", "p", "radii", "global_radii", "samples", "family", "refine", "polish",
             "contrast", "jobs"),
    "io": ("out", "format", "field", "field_out", "histogram", "store"),
}


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    raw: dict[str, Any] = {}
    if args.config:
        raw = load_config(args.config).model_dump(mode="json")
    raw["mode"] = args.mode
    values = vars(args)
    for section, keys in _SECTIONS.items():
        for key in keys:
            if values.get(key) is not None:
                raw.setdefault(section, {})[key] = values[key]
    if args.levels:
        lo, _, hi = args.levels.partition(":")
        raw.setdefault("levels", {}).update({"k_min": lo, "k_max": hi})
    return parse_config(raw, source=args.config or "command line")


def main(argv: Optional[list[str]] = None) -> int:
    configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return run(config_from_args(args))
    except CaptoolError as e:
        logfire.error("{kind}: {message}", kind=type(e).__name__, message=str(e))
        print(f"captool: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
