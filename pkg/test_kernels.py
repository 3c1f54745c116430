import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from pydantic import ValidationError

from errors import GridMismatchError, SingularityError
from grid import AtomicMeasure, Field, Grid, GridSet
from kernels import (
    KernelKind,
    KernelSpec,
    bessel_value,
    build_table,
    cached_table,
    check_two_sided,
    convolve,
    convolve_measure,
    direct_convolve,
    gamma_constant,
    kernel_cell_average,
    power_method_norm,
    read_table,
    riesz_value,
    write_table,
)

G2_1D = KernelSpec(kind=KernelKind.BESSEL, alpha=2.0, dim=1)
I2_3D = KernelSpec(kind=KernelKind.RIESZ, alpha=2.0, dim=3)


class TestKernelSpec:
    def test_riesz_order_must_be_below_dim(self):
        with pytest.raises(ValidationError):
            KernelSpec(kind=KernelKind.RIESZ, alpha=1.0, dim=1)

    def test_alpha_positive(self):
        with pytest.raises(ValidationError):
            KernelSpec(kind=KernelKind.BESSEL, alpha=0.0, dim=2)

    def test_hashable_for_table_cache(self, bessel1d):
        assert hash(bessel1d) == hash(KernelSpec(kind="bessel", alpha=0.5, dim=1))


class TestPointValues:
    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
    def test_bessel_closed_form(self, r):
        assert bessel_value(G2_1D, [r]) == pytest.approx(math.exp(-r) / 2, rel=1e-7)

    @pytest.mark.parametrize("r", [0.5, 1.0, 2.0])
    def test_riesz_newtonian(self, r):
        assert riesz_value(I2_3D, [r, 0.0, 0.0]) == pytest.approx(1 / (4 * math.pi * r), rel=1e-12)

    def test_gamma_constant_newtonian(self):
        assert gamma_constant(3, 2.0) == pytest.approx(1 / (4 * math.pi), rel=1e-14)

    def test_bessel_finite_at_origin_above_dim(self):
        assert bessel_value(G2_1D, [0.0]) == pytest.approx(0.5, rel=1e-10)

    def test_singular_at_origin(self, bessel1d, riesz1d):
        with pytest.raises(SingularityError):
            bessel_value(bessel1d, [0.0])
        with pytest.raises(SingularityError):
            riesz_value(riesz1d, [0.0])

    def test_kind_mismatch(self, bessel1d):
        with pytest.raises(ValueError):
            riesz_value(bessel1d, [1.0])

    def test_bessel_below_riesz(self):
        # exp(-t) damping makes G_alpha smaller than I_alpha everywhere
        bessel = KernelSpec(kind=KernelKind.BESSEL, alpha=1.0, dim=2)
        riesz = KernelSpec(kind=KernelKind.RIESZ, alpha=1.0, dim=2)
        pts = np.array([[0.3, 0.0], [1.0, 1.0], [2.5, -1.0]])
        assert np.all(bessel_value(bessel, pts) < riesz_value(riesz, pts))


class TestCellAverages:
    def test_riesz_origin_cell(self, grid1d):
        spec = KernelSpec(kind=KernelKind.RIESZ, alpha=0.5, dim=1)
        h = grid1d.h
        exact = gamma_constant(1, 0.5) * 4 * math.sqrt(h / 2) / h
        (avg,) = kernel_cell_average(spec, [-h / 2], [h / 2])
        assert avg == pytest.approx(exact, rel=1e-6)

    def test_far_cell_matches_point_value(self, grid1d, riesz1d):
        h = grid1d.h
        (avg,) = kernel_cell_average(riesz1d, [3 - h / 2], [3 + h / 2])
        assert avg == pytest.approx(riesz_value(riesz1d, [3.0]), rel=1e-3)

    def test_bessel_2d_cell(self):
        spec = KernelSpec(kind=KernelKind.BESSEL, alpha=1.0, dim=2)
        h = 0.05
        center = np.array([1.0, 0.5])
        (avg,) = kernel_cell_average(spec, center - h / 2, center + h / 2)
        assert avg == pytest.approx(bessel_value(spec, center), rel=1e-3)


class TestKernelTable:
    def test_symmetry_1d(self, bessel1d, grid1d):
        table = cached_table(bessel1d, grid1d)
        for k in (1, 5, 40, 63):
            assert table.at(k) == table.at(-k)
        assert table.at(0) > table.at(1) > table.at(10)

    def test_symmetry_2d(self, bessel2d, grid2d):
        table = cached_table(bessel2d, grid2d)
        assert table.at((3, 7)) == table.at((7, 3)) == table.at((-3, 7)) == table.at((7, -3))

    def test_far_entries_track_point_values(self, riesz1d, grid1d):
        table = cached_table(riesz1d, grid1d)
        assert table.at(40) == pytest.approx(riesz_value(riesz1d, [40 * grid1d.h]), rel=1e-4)

    @pytest.mark.parametrize("dim, alpha, N", [(1, 0.25, 32), (2, 1.0, 16)])
    def test_riesz_table_is_homogeneous(self, dim, alpha, N):
        # I(2x) = 2^(alpha - n) I(x), cell averages included
        spec = KernelSpec(kind=KernelKind.RIESZ, alpha=alpha, dim=dim)
        grid = Grid(dim, N, 2.0)
        base = build_table(spec, grid).samples
        wide = build_table(spec, grid.scaled(2.0)).samples
        np.testing.assert_allclose(wide, 2.0 ** (alpha - dim) * base, rtol=1e-4)

    def test_dimension_mismatch(self, bessel1d, grid2d):
        with pytest.raises(ValueError):
            build_table(bessel1d, grid2d)

    def test_write_read(self, tmp_path, bessel1d):
        grid = Grid(1, 16)
        table = build_table(bessel1d, grid)
        write_table(tmp_path / "table.bin", table)
        back = read_table(tmp_path / "table.bin", bessel1d)
        np.testing.assert_array_equal(back.samples, table.samples)


class TestConvolution:
    @given(values=arrays(np.float64, 16, elements=st.floats(0, 10)))
    @settings(max_examples=30, deadline=None)
    def test_fft_matches_direct_sum_1d(self, values):
        grid = Grid(1, 16)
        table = cached_table(KernelSpec(kind=KernelKind.RIESZ, alpha=0.25, dim=1), grid)
        f = Field(grid, values, nonneg=True)
        fast, slow = convolve(table, f).values, direct_convolve(table, f).values
        np.testing.assert_allclose(fast, slow, rtol=1e-9, atol=1e-9 * max(float(slow.max()), 1.0))

    def test_fft_matches_direct_sum_2d(self, bessel2d):
        grid = Grid(2, 8)
        table = build_table(bessel2d, grid)
        f = Field(grid, np.random.default_rng(3).normal(size=grid.shape))
        np.testing.assert_allclose(convolve(table, f).values, direct_convolve(table, f).values,
                                   rtol=1e-9, atol=1e-12)

    def test_linearity(self, bessel1d, grid1d):
        table = cached_table(bessel1d, grid1d)
        a = GridSet.box(grid1d, 0.0, 1.0).indicator()
        b = GridSet.box(grid1d, -2.0, -1.5).indicator()
        np.testing.assert_allclose(
            convolve(table, a + b.scaled(3.0)).values,
            convolve(table, a).values + 3.0 * convolve(table, b).values,
            rtol=1e-12, atol=1e-12,
        )

    def test_grid_mismatch(self, bessel1d, grid1d):
        with pytest.raises(GridMismatchError):
            convolve(cached_table(bessel1d, grid1d), Field.zeros(grid1d.refined()))

    def test_measure_away_from_atom(self, riesz1d, grid1d):
        table = cached_table(riesz1d, grid1d)
        x0 = grid1d.axis()[32]
        potential = convolve_measure(table, AtomicMeasure(np.array([[x0]]), np.array([2.0])))
        assert potential.values[40] == pytest.approx(2.0 * riesz_value(riesz1d, [1.0]), rel=1e-12)
        assert np.all(np.isfinite(potential.values))


class TestOperatorNorm:
    def test_power_method(self, bessel1d, grid1d):
        table = cached_table(bessel1d, grid1d)
        mask = GridSet.box(grid1d, 0.0, 1.0).mask
        small = power_method_norm(table, mask)
        large = power_method_norm(table, np.ones(grid1d.shape, dtype=bool))
        assert 0 < small < large * 1.01

    def test_empty_mask(self, bessel1d, grid1d):
        table = cached_table(bessel1d, grid1d)
        assert power_method_norm(table, np.zeros(grid1d.shape, dtype=bool)) == 0.0


class TestTwoSidedBounds:
    def test_constants_finite(self, bessel1d, grid1d):
        bounds = check_two_sided(bessel1d, grid1d)
        assert 1.0 <= bounds.c_near < math.inf
        assert 1.0 <= bounds.c_far < math.inf
        assert bounds.near_radius == 8.0

    def test_riesz_rejected(self, riesz1d, grid1d):
        with pytest.raises(ValueError):
            check_two_sided(riesz1d, grid1d)

    def test_small_cube_rejected(self, bessel1d):
        with pytest.raises(ValueError):
            check_two_sided(bessel1d, Grid(1, 64, 2.0))
