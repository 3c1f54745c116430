import math

import pytest

from capacity import CapacityCache
from choquet import ChoquetConfig
from errors import SkipBudgetError, SolverConvergenceError
from families import TestFamily, atomic_measures, bump_sums, family_for, far_bumps, set_unions
from grid import Grid
from harness import (
    TRUNCATION_NOTE,
    HarnessConfig,
    InequalityId,
    InequalityReport,
    ReportParams,
    band_constant,
    run_samples,
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
from kernels import KernelKind, KernelSpec

SEED = 11


def scaled_family(base: TestFamily, c: float) -> TestFamily:
    return TestFamily(f"{base.name}_x{c:g}", base.count, base.seed, lambda rng: base.generator(rng).scaled(c))


@pytest.fixture
def params(bessel1d, grid1d) -> ReportParams:
    return ReportParams(kind=bessel1d.kind, dim=1, alpha=bessel1d.alpha, s=2.0, tol=1e-3, N=grid1d.N, L=grid1d.L)


class TestFamilies:
    def test_seeded(self):
        assert bump_sums(2, 4, SEED).recipes() == bump_sums(2, 4, SEED).recipes()
        assert bump_sums(2, 4, SEED).recipes() != bump_sums(2, 4, SEED + 1).recipes()

    def test_sample_independent_of_count(self):
        assert set_unions(1, 3, SEED).recipes() == set_unions(1, 6, SEED).recipes()[:3]

    def test_atomic_diameters(self):
        for mu in atomic_measures(2, 20, SEED).realize(Grid(2, 16)):
            if len(mu.masses) > 1:
                assert 0.2 - 1e-12 <= mu.support_diameter <= 0.9 + 1e-12

    def test_far_bumps_are_separated(self):
        for recipe in far_bumps(2, 5, SEED).recipes():
            a, b = recipe.centers
            assert math.dist(a, b) == pytest.approx(4.0)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            family_for("nope", 1, 3, SEED)

    def test_capacitary_densities_need_kernel(self):
        with pytest.raises(ValueError):
            family_for("capacitary_densities", 1, 3, SEED)


class TestRunSamples:
    def test_skips_failures_and_zero_denominators(self, params):
        def evaluate(sample):
            if sample == "fail":
                raise SolverConvergenceError(0.1, 5)
            if sample == "zero":
                return 1.0, 0.0
            return 2.0, 1.0

        report = run_samples(InequalityId.MAZYA, ["ok", "fail", "zero", "ok"], evaluate, params, HarnessConfig(jobs=1))
        assert [row.sample for row in report.per_sample] == ["0", "3"]
        assert report.observed_constant == 2.0
        assert len(report.skipped) == 2
        assert report.skipped[0].startswith("1:")
        assert report.skipped[1] == "2: 0/0"

    def test_rejected_sample_is_skipped(self, params):
        def evaluate(sample):
            if sample == "bad":
                raise ValueError("support too wide")
            return 1.0, 1.0

        report = run_samples(InequalityId.MAZYA, ["ok", "bad"], evaluate, params, HarnessConfig(jobs=1))
        assert [row.sample for row in report.per_sample] == ["0"]
        assert report.skipped == ["1: rejected: support too wide"]

    def test_skip_budget(self, params):
        report = InequalityReport(inequality_id=InequalityId.MAZYA, params=params, observed_constant=1.0,
                                  min_ratio=1.0, skipped=["a: x"], total=10)
        report.enforce_skip_budget()
        report.skipped.append("b: y")
        with pytest.raises(SkipBudgetError) as info:
            report.enforce_skip_budget()
        assert info.value.exit_code == 5


class TestInequalities:
    def test_lemma31_invariant_under_mass_scaling(self, bessel1d, grid1d):
        family = atomic_measures(1, 3, SEED)
        base = verify_lemma31(family, bessel1d, 2.0, grid1d)
        scaled = verify_lemma31(scaled_family(family, 2.0), bessel1d, 2.0, grid1d)
        assert 0 < base.observed_constant < math.inf
        assert scaled.observed_constant == pytest.approx(base.observed_constant, rel=1e-8)
        assert not base.skipped

    def test_lemma31_skips_wide_supports(self, bessel1d, grid1d):
        family = atomic_measures(1, 4, SEED, diameter=(1.2, 1.5))
        wide = sum(len(recipe.masses) > 1 for recipe in family.recipes())
        report = verify_lemma31(family, bessel1d, 2.0, grid1d)
        assert report.total == 4
        assert len(report.skipped) == wide
        assert all("support diameter" in reason for reason in report.skipped)

    def test_lemma31_needs_bessel(self, riesz1d, grid1d):
        with pytest.raises(ValueError):
            verify_lemma31(atomic_measures(1, 1, SEED), riesz1d, 2.0, grid1d)

    def test_capstrong_invariant_under_scaling(self, bessel1d, grid1d, shared_cache):
        cfg = HarnessConfig(levels=ChoquetConfig(k_min=-40, k_max=8), jobs=1)
        family = bump_sums(1, 2, SEED)
        base = verify_capstrong(family, bessel1d, 2.0, grid1d, cfg, shared_cache)
        scaled = verify_capstrong(scaled_family(family, 2.0), bessel1d, 2.0, grid1d, cfg, shared_cache)
        assert base.total == 2 and not base.skipped
        for a, b in zip(base.per_sample, scaled.per_sample):
            assert b.ratio == pytest.approx(a.ratio, rel=1e-6)

    def test_mazya(self, bessel1d, grid1d, shared_cache):
        report = verify_mazya(bump_sums(1, 2, SEED), bessel1d, 2.0, grid1d, HarnessConfig(), shared_cache)
        assert report.inequality_id is InequalityId.MAZYA
        assert 0 < report.min_ratio <= report.observed_constant < math.inf

    def test_gfl1c_is_surrogate(self, bessel1d, grid1d, shared_cache):
        report = verify_gfl1c(bump_sums(1, 2, SEED), bessel1d, 2.0, grid1d, HarnessConfig(), shared_cache)
        assert report.surrogate
        assert report.observed_constant > 0

    def test_mvn_chain_holds(self, bessel1d, grid1d, shared_cache):
        report = verify_mvn_chain(bump_sums(1, 2, SEED), bessel1d, 2.0, grid1d, HarnessConfig(), shared_cache)
        assert "exceeded the beta objective on 0 samples" in report.notes[-1]

    def test_thm12_on_sets(self, bessel1d, grid1d, shared_cache):
        report = verify_thm12(set_unions(1, 1, SEED), bessel1d, 2.0, grid1d, HarnessConfig(), shared_cache)
        assert 0 < report.observed_constant < math.inf
        assert any(note.startswith("band") for note in report.notes)
        # G*W >= u, so the lifted Choquet integral bounds the denominator
        assert "Choquet(u) exceeded Choquet(G*W) on 0 samples" in report.notes
        assert any(note.startswith("Choquet(G*W)/beta(W) max") for note in report.notes)

    def test_gamma_band(self, bessel1d, grid1d, shared_cache):
        report = verify_gamma_band(bump_sums(1, 2, SEED), bessel1d, 2.0, grid1d, HarnessConfig(), shared_cache)
        assert report.inequality_id is InequalityId.GAMMA_BAND
        assert not report.skipped
        assert 0 < report.min_ratio <= report.observed_constant < math.inf
        assert report.notes[-1].startswith("band")
        assert 1.0 <= band_constant(report) < math.inf

    def test_thm13(self, bessel1d, grid1d, shared_cache):
        report = verify_thm13(bump_sums(1, 2, SEED), bessel1d, 2.0, 1.0, grid1d, HarnessConfig(), shared_cache)
        assert not report.exploratory
        # M f >= |f| pointwise and the Choquet integral is monotone
        assert report.min_ratio >= 1 - 2e-3

    def test_thm13_below_threshold_is_exploratory(self, bessel1d, grid1d, shared_cache):
        report = verify_thm13(bump_sums(1, 1, SEED), bessel1d, 2.0, 0.4, grid1d, HarnessConfig(), shared_cache)
        assert report.exploratory
        assert math.isfinite(report.observed_constant)

    def test_quasiadd(self, bessel1d, grid1d, shared_cache):
        report = verify_quasiadd(set_unions(1, 2, SEED), bessel1d, 2.0, grid1d, HarnessConfig(), shared_cache)
        assert report.min_ratio >= 1 - 3e-3
        assert math.isfinite(report.observed_constant)
        assert report.notes[-1].startswith("cover multiplicity")

    def test_vwh_with_contrast(self, riesz1d, grid1d):
        contrast = KernelSpec(kind=KernelKind.BESSEL, alpha=riesz1d.alpha, dim=1)
        report = verify_vwh_riesz(far_bumps(1, 2, SEED), riesz1d, 2.0, grid1d, contrast=contrast)
        assert TRUNCATION_NOTE in report.notes
        assert any(note.startswith("contrast bessel") for note in report.notes)
        assert 0 < report.observed_constant < math.inf

    def test_vwh_invariant_under_dilation(self, riesz1d, grid1d):
        # the Riesz kernel is homogeneous, so dilating samples and grid together leaves the ratio alone
        family = far_bumps(1, 2, SEED)
        base = verify_vwh_riesz(family, riesz1d, 2.0, grid1d)
        wide = verify_vwh_riesz(family.dilated(2.0), riesz1d, 2.0, grid1d.scaled(2.0))
        assert len(wide.per_sample) == len(base.per_sample) == 2
        for a, b in zip(base.per_sample, wide.per_sample):
            assert b.ratio == pytest.approx(a.ratio, rel=1e-3)

    def test_vwh_needs_riesz(self, bessel1d, grid1d):
        with pytest.raises(ValueError):
            verify_vwh_riesz(far_bumps(1, 1, SEED), bessel1d, 2.0, grid1d)

    def test_two_sided_with_refinement(self, bessel1d, grid1d):
        report = with_refinement(lambda g: verify_two_sided_kernel(bessel1d, g), grid1d)
        assert report.inequality_id is InequalityId.TWO_SIDED_KERNEL
        assert report.refined_constant is not None
        assert report.drift is not None and math.isfinite(report.drift)


@pytest.mark.slow
def test_lemma31_constant_stable_under_refinement():
    spec = KernelSpec(kind=KernelKind.BESSEL, alpha=0.5, dim=1)
    family = atomic_measures(1, 10, SEED)
    report = with_refinement(lambda g: verify_lemma31(family, spec, 2.0, g), Grid(1, 128))
    assert report.drift <= 0.25


@pytest.mark.slow
def test_quasiadd_constant_stable_under_refinement():
    spec = KernelSpec(kind=KernelKind.BESSEL, alpha=0.5, dim=1)
    family = set_unions(1, 5, SEED)
    cache = CapacityCache()
    report = with_refinement(lambda g: verify_quasiadd(family, spec, 2.0, g, HarnessConfig(), cache), Grid(1, 128))
    assert report.drift <= 0.25


@pytest.mark.slow
def test_capstrong_constant_stable_under_refinement():
    spec = KernelSpec(kind=KernelKind.BESSEL, alpha=0.5, dim=1)
    family = bump_sums(1, 6, SEED)
    cache = CapacityCache()
    report = with_refinement(lambda g: verify_capstrong(family, spec, 2.0, g, HarnessConfig(), cache), Grid(1, 128))
    assert report.drift <= 0.25


@pytest.mark.slow
@pytest.mark.parametrize("q", [0.75, 1.0])
def test_thm13_constant_stable_under_refinement(q):
    spec = KernelSpec(kind=KernelKind.BESSEL, alpha=0.5, dim=1)
    family = bump_sums(1, 6, SEED)
    cache = CapacityCache()
    report = with_refinement(lambda g: verify_thm13(family, spec, 2.0, q, g, HarnessConfig(), cache), Grid(1, 128))
    assert not report.exploratory
    assert report.drift <= 0.25


@pytest.mark.slow
def test_gamma_band_stable_under_refinement():
    spec = KernelSpec(kind=KernelKind.BESSEL, alpha=0.5, dim=1)
    family = bump_sums(1, 6, SEED)
    cache = CapacityCache()
    grid = Grid(1, 128)
    base = verify_gamma_band(family, spec, 2.0, grid, HarnessConfig(), cache)
    fine = verify_gamma_band(family, spec, 2.0, grid.refined(), HarnessConfig(), cache)
    assert band_constant(fine) / band_constant(base) == pytest.approx(1.0, abs=0.25)
