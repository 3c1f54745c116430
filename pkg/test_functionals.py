import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capacity import CapacityProblem, capacitary_measure, capacity
from choquet import ChoquetConfig
from errors import FeasibilityError
from families import BumpSum
from functionals import (
    FunctionalKind,
    WitnessConfig,
    beta_objective,
    beta_value,
    beta_witness_from_choquet,
    dyadic_bands,
    dyadic_family,
    gamma_functional,
    kv_upper,
    lambda_upper,
    measure_norm,
    multiplier_norm,
)
from grid import AtomicMeasure, Field, GridSet
from kernels import cached_table

TOL = 1e-3

bumps = st.builds(
    lambda c, w, a: BumpSum(((c,),), (w,), (a,)),
    st.floats(-2.0, 2.0),
    st.floats(0.1, 0.5),
    st.sampled_from([0.25, 0.5, 1.0, 2.0, 4.0]),
)


@pytest.fixture
def E(grid1d) -> GridSet:
    return GridSet.box(grid1d, 0.0, 1.0)


@pytest.fixture
def bump(grid1d) -> Field:
    return Field.from_function(grid1d, lambda x: np.exp(-4 * x[..., 0] ** 2), nonneg=True)


class TestBeta:
    def test_single_cell(self, grid1d, bessel1d):
        values = np.zeros(grid1d.shape)
        values[20] = 3.0
        f = Field(grid1d, values, nonneg=True)
        table = cached_table(bessel1d, grid1d)
        assert beta_value(Field.zeros(grid1d), f, bessel1d, 2.0) == pytest.approx(3.0 / table.at(0), rel=1e-12)

    def test_degree_one_homogeneous(self, bump, bessel1d, grid1d):
        table = cached_table(bessel1d, grid1d)
        assert beta_objective(bump.scaled(2.0), table, 2.0) == pytest.approx(
            2.0 * beta_objective(bump, table, 2.0), rel=1e-12
        )

    def test_zero_density(self, grid1d, bessel1d):
        assert beta_objective(Field.zeros(grid1d), cached_table(bessel1d, grid1d), 2.0) == 0.0

    def test_infeasible_density(self, E, bessel1d):
        f = Field.constant(E.grid, 1e-6)
        with pytest.raises(FeasibilityError) as info:
            beta_value(E.indicator(), f, bessel1d, 2.0)
        assert info.value.worst_violation > 0.9
        assert E.mask[info.value.at_index]

    def test_negative_density_rejected(self, grid1d, bessel1d):
        with pytest.raises(ValueError):
            beta_value(Field.zeros(grid1d), Field.constant(grid1d, -1.0), bessel1d, 2.0)


class TestGamma:
    def test_indicator_is_capacity(self, E, bessel1d, shared_cache):
        cap = capacity(CapacityProblem(bessel1d, E.grid, E, 2.0), TOL, cache=shared_cache).value
        gamma = gamma_functional(E.indicator(), bessel1d, 2.0, TOL)
        assert gamma.kind is FunctionalKind.GAMMA
        assert gamma.certified
        assert gamma.value == pytest.approx(cap, rel=1e-12)

    def test_homogeneous(self, E, bessel1d):
        once = gamma_functional(E.indicator(), bessel1d, 2.0, TOL).value
        twice = gamma_functional(E.indicator().scaled(2.0), bessel1d, 2.0, TOL).value
        assert twice == pytest.approx(2.0 * once, rel=1e-9)

    @given(first=bumps, second=bumps)
    @settings(max_examples=30, deadline=None)
    def test_subadditive(self, first, second, grid1d, bessel1d):
        u1, u2 = first.realize(grid1d), second.realize(grid1d)
        g1 = gamma_functional(u1, bessel1d, 2.0, TOL).value
        g2 = gamma_functional(u2, bessel1d, 2.0, TOL).value
        joint = gamma_functional(u1 + u2, bessel1d, 2.0, TOL).value
        assert joint <= g1 + g2 + 3 * TOL * (g1 + g2)

    def test_zero(self, grid1d, bessel1d):
        value = gamma_functional(Field.zeros(grid1d), bessel1d, 2.0)
        assert value.value == 0.0
        assert value.details["gap"] == 0.0


class TestKV:
    def test_zero(self, grid1d, bessel1d):
        assert kv_upper(Field.zeros(grid1d), bessel1d, 2.0).value == 0.0

    def test_below_beta_objective(self, bump, bessel1d, grid1d):
        kv = kv_upper(bump, bessel1d, 2.0)
        assert kv.value <= beta_objective(bump, cached_table(bessel1d, grid1d), 2.0)
        assert kv.details["candidate"] in kv.details["candidates"]
        assert set(kv.details["candidates"]) == {"identity", "kernel_1h", "kernel_2h", "kernel_4h"}

    def test_candidates_dominate_the_field(self, bump, bessel1d):
        witness = kv_upper(bump, bessel1d, 2.0).witness
        support = bump.values > 0
        assert np.all(witness.values[support] >= bump.values[support] * (1 - 1e-12))


class TestBetaWitness:
    def test_zero(self, grid1d, bessel1d):
        value = beta_witness_from_choquet(Field.zeros(grid1d), bessel1d, 2.0)
        assert value.value == 0.0
        assert value.details["pieces"] == 0

    def test_indicator(self, E, bessel1d, shared_cache):
        u = E.indicator()
        value = beta_witness_from_choquet(u, bessel1d, 2.0, WitnessConfig(), cache=shared_cache)
        assert 0 < value.value < math.inf
        assert 1.0 <= value.details["rescale"] <= 100.0
        assert value.details["pieces"] == 3
        assert value.details["dropped"] == 0.0
        assert beta_value(u, value.witness, bessel1d, 2.0) == pytest.approx(value.value, rel=1e-9)

    def test_polish_never_worsens(self, E, bessel1d, shared_cache):
        u = E.indicator()
        plain = beta_witness_from_choquet(u, bessel1d, 2.0, WitnessConfig(), cache=shared_cache)
        polished = beta_witness_from_choquet(u, bessel1d, 2.0, WitnessConfig(polish=True, polish_steps=5),
                                             cache=shared_cache)
        assert polished.value <= plain.value
        assert polished.details["polished"]
        beta_value(u, polished.witness, bessel1d, 2.0)

    def test_lambda_is_labelled_surrogate(self, E, bessel1d, shared_cache):
        value = lambda_upper(E.indicator(), bessel1d, 2.0, cache=shared_cache)
        assert value.kind is FunctionalKind.LAMBDA_UPPER
        assert "surrogate" in value.details["label"]


class TestDyadicBands:
    def test_partition_of_support(self, bump):
        cfg = ChoquetConfig(k_min=-6, k_max=2)
        bands = dyadic_bands(bump, cfg)
        covered = np.zeros(bump.grid.shape, dtype=int)
        for k, band in bands:
            covered += band.mask
            assert np.all(bump.values[band.mask] <= 2.0**k)
        np.testing.assert_array_equal(covered, (bump.values > 0).astype(int))

    def test_top_band_follows_the_peak(self, grid1d):
        u = Field.constant(grid1d, 100.0)
        (k, band), = dyadic_bands(u, ChoquetConfig(k_min=-2, k_max=2))
        assert k == 7
        assert band.count == grid1d.N


class TestMultiplierNorm:
    def test_zero(self, grid1d, bessel1d):
        assert multiplier_norm(Field.zeros(grid1d), 2.0, bessel1d, 2.0).value == 0.0

    def test_single_set(self, E, bessel1d, shared_cache):
        cap = capacity(CapacityProblem(bessel1d, E.grid, E, 2.0), TOL, cache=shared_cache).value
        value = multiplier_norm(E.indicator(), 2.0, bessel1d, 2.0, [E], TOL, cache=shared_cache)
        assert value.value == pytest.approx(math.sqrt(E.measure() / cap), rel=1e-12)

    def test_homogeneous(self, E, bessel1d, shared_cache):
        family = [E, GridSet.box(E.grid, 0.0, 0.5)]
        f = E.indicator()
        once = multiplier_norm(f, 3.0, bessel1d, 2.0, family, TOL, cache=shared_cache).value
        twice = multiplier_norm(f.scaled(2.0), 3.0, bessel1d, 2.0, family, TOL, cache=shared_cache).value
        assert twice == pytest.approx(2.0 * once, rel=1e-12)

    def test_p_above_one(self, E, bessel1d):
        with pytest.raises(ValueError):
            multiplier_norm(E.indicator(), 1.0, bessel1d, 2.0, [E])

    def test_dyadic_family(self, bump):
        family = dyadic_family(bump)
        boxes = [K for K in family if K.count in (64, 32, 16, 8, 4)]
        assert len(boxes) >= 31
        assert any(K.count == bump.grid.N for K in family)


class TestMeasureNorm:
    def test_zero(self, E, bessel1d):
        mu = AtomicMeasure(np.array([[0.5]]), np.array([0.0]))
        assert measure_norm(mu, bessel1d, 2.0, [E]).value == 0.0

    def test_capacitary_measure(self, E, bessel1d, shared_cache):
        problem = CapacityProblem(bessel1d, E.grid, E, 2.0)
        mu = AtomicMeasure.from_cell_masses(capacitary_measure(problem, TOL, cache=shared_cache).mu)
        once = measure_norm(mu, bessel1d, 2.0, [E], TOL, cache=shared_cache)
        assert once.value == pytest.approx(1.0, abs=5 * TOL)
        twice = measure_norm(mu.scaled(2.0), bessel1d, 2.0, [E], TOL, cache=shared_cache)
        assert twice.value == pytest.approx(2.0 * once.value, rel=1e-12)
