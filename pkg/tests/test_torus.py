"""Spectral substrate: transforms, derivatives, Poisson and elliptic solves."""

import numpy as np
import pytest

from homwave import torus
from homwave.torus import (
    CoefficientField,
    ConfigurationError,
    Field,
    SolvabilityError,
    TorusGrid,
    cell_average,
    coefficient_from_spec,
    deriv_values,
    derivative,
    gradient_values,
    prolong_values,
    solve_div_a_grad,
    solve_elliptic,
    solve_poisson,
    solve_poisson_values,
    spectral_transform,
    weak_residual,
)

from conftest import LAMINATE, band_limited


class TestGridAndField:
    def test_grid_validation(self):
        with pytest.raises(ConfigurationError):
            TorusGrid(3, 16)
        with pytest.raises(ConfigurationError):
            TorusGrid(1, 24)  # not a power of two
        with pytest.raises(ConfigurationError):
            TorusGrid(1, 4)   # too small

    def test_field_shapes_and_rank(self, grid2d):
        f = Field(grid2d, np.zeros(grid2d.shape))
        assert f.rank == "scalar"
        v = Field(grid2d, np.zeros((2,) + grid2d.shape))
        assert v.rank == "vector"
        with pytest.raises(ConfigurationError):
            Field(grid2d, np.zeros((grid2d.n, grid2d.n + 1)))

    def test_fields_are_immutable(self, grid1d):
        f = Field(grid1d, np.ones(grid1d.shape))
        with pytest.raises(ValueError):
            f.values[0] = 2.0


class TestSpectralTransform:
    def test_constant_has_single_zero_mode(self, grid1d):
        f = Field(grid1d, np.ones(grid1d.shape))
        spec = spectral_transform(f, "forward")
        assert abs(spec.values[0] - grid1d.n) < 1e-12
        assert np.max(np.abs(spec.values[1:])) < 1e-12

    def test_roundtrip(self, grid2d, rng):
        f = Field(grid2d, rng.standard_normal(grid2d.shape))
        back = spectral_transform(spectral_transform(f, "forward"), "inverse")
        rel = np.max(np.abs(back.values.real - f.values)) / np.max(np.abs(f.values))
        assert rel < 1e-13

    def test_real_input_hermitian_output(self, grid1d, rng):
        f = Field(grid1d, rng.standard_normal(grid1d.shape))
        spec = spectral_transform(f, "forward").values
        assert np.allclose(spec[1:], np.conj(spec[1:][::-1]), atol=1e-10)

    def test_single_mode_pair(self, grid1d):
        x = grid1d.coordinate_axes()[0].ravel()
        f = Field(grid1d, np.sin(2 * np.pi * x))
        spec = spectral_transform(f, "forward").values
        live = np.nonzero(np.abs(spec) > 1e-9)[0]
        assert set(live) == {1, grid1d.n - 1}


class TestDerivative:
    def test_sin_derivative(self, grid1d):
        x = grid1d.coordinate_axes()[0].ravel()
        f = Field(grid1d, np.sin(2 * np.pi * x))
        df = derivative(f, [0])
        assert np.max(np.abs(df.values - 2 * np.pi * np.cos(2 * np.pi * x))) < 1e-12

    def test_laplacian_of_constant(self, grid2d):
        f = np.full(grid2d.shape, 3.5)
        out = torus.laplacian_values(grid2d, f)
        assert np.max(np.abs(out)) < 1e-12

    def test_mixed_partials_commute(self, grid2d, rng):
        f = band_limited(grid2d, rng)
        d01 = deriv_values(grid2d, deriv_values(grid2d, f, [0]), [1])
        d10 = deriv_values(grid2d, deriv_values(grid2d, f, [1]), [0])
        assert np.max(np.abs(d01 - d10)) < 1e-10

    def test_integration_by_parts_is_exact(self, grid2d, rng):
        u = rng.standard_normal(grid2d.shape)
        v = rng.standard_normal(grid2d.shape)
        lhs = np.mean(u * deriv_values(grid2d, v, [0]))
        rhs = np.mean(deriv_values(grid2d, u, [0]) * v)
        scale = max(abs(lhs), abs(rhs), 1.0)
        assert abs(lhs + rhs) / scale < 1e-12


class TestPoisson:
    def test_single_mode(self, grid1d):
        x = grid1d.coordinate_axes()[0].ravel()
        rhs = np.cos(2 * np.pi * x)
        u, _ = solve_poisson_values(grid1d, rhs)
        assert np.max(np.abs(u - rhs / (4 * np.pi ** 2))) < 1e-13

    def test_zero_rhs(self, grid2d):
        u, _ = solve_poisson_values(grid2d, np.zeros(grid2d.shape))
        assert np.all(u == 0.0)

    def test_random_zero_mean_residual(self, grid2d, rng):
        rhs = band_limited(grid2d, rng)
        rhs -= rhs.mean()
        u, _ = solve_poisson_values(grid2d, rhs)
        res = -torus.laplacian_values(grid2d, u) - rhs
        assert np.sqrt(np.mean(res ** 2)) / np.sqrt(np.mean(rhs ** 2)) < 1e-12
        assert abs(u.mean()) < 1e-14

    def test_strict_mode_rejects_mean(self, grid1d):
        rhs = np.ones(grid1d.shape)
        with pytest.raises(SolvabilityError):
            solve_poisson_values(grid1d, rhs, strict=True)

    def test_mean_recorded(self, grid1d):
        f = Field(grid1d, np.ones(grid1d.shape) * 2.0)
        u = solve_poisson(f)
        assert abs(u.meta["dropped_mean"] - 2.0) < 1e-14

    def test_resolve_is_fixed_point(self, grid2d, rng):
        rhs = band_limited(grid2d, rng)
        rhs -= rhs.mean()
        u1, _ = solve_poisson_values(grid2d, rhs)
        u2, _ = solve_poisson_values(grid2d, -torus.laplacian_values(grid2d, u1))
        assert np.max(np.abs(u1 - u2)) < 1e-12 * np.max(np.abs(u1))


class TestVariableCoefficientSolve:
    def test_identity_constant_flux(self, grid2d):
        a = coefficient_from_spec({"kind": "constant", "value": 1.0}, grid2d)
        flux = np.zeros((2,) + grid2d.shape)
        flux[0] = 1.0
        phi = solve_div_a_grad(a, flux)
        assert np.max(np.abs(phi)) < 1e-12

    def test_laminate_first_corrector_matches_oracle(self):
        # field values are interface-aliasing-limited (O(h)); the averaged
        # functionals agree to solver tolerance
        from homwave import oracle1d
        prof = oracle1d.Profile1D(breakpoints=[0, 0.5, 1], values=[1.0, 4.0])
        oh = oracle1d.correctors_1d(prof, 1)
        gaps = []
        for n in (512, 1024):
            grid = torus.TorusGrid(1, n)
            a = coefficient_from_spec(LAMINATE, grid)
            flux = a.values[:, 0, :] * 1.0  # a e with e = +1
            phi = solve_div_a_grad(a, flux.reshape((1,) + grid.shape))
            x = np.arange(grid.n) * grid.h
            gaps.append(np.sqrt(np.mean((phi - oh.phi[1](x)) ** 2)))
            lam0 = (a.values[0, 0] * (gradient_values(grid, phi)[0] + 1.0)).mean()
            assert abs(lam0 - 1.6) < 1e-8
        assert gaps[1] < 1e-3
        assert gaps[1] < 0.6 * gaps[0]  # refines with the grid

    def test_weak_residual_contract(self, smooth2d_a, rng):
        flux = np.stack([band_limited(smooth2d_a.grid, rng),
                         band_limited(smooth2d_a.grid, rng)])
        phi = solve_div_a_grad(smooth2d_a, flux)
        assert weak_residual(smooth2d_a, phi, flux) < 1e-10

    def test_deterministic(self, smooth2d_a, rng):
        flux = np.stack([band_limited(smooth2d_a.grid, rng),
                         band_limited(smooth2d_a.grid, rng)])
        phi1 = solve_div_a_grad(smooth2d_a, flux)
        phi2 = solve_div_a_grad(smooth2d_a, flux)
        assert np.array_equal(phi1, phi2)

    def test_solve_elliptic_rejects_mean(self, smooth2d_a):
        with pytest.raises(SolvabilityError):
            solve_elliptic(smooth2d_a, np.ones(smooth2d_a.grid.shape))


class TestCellAverage:
    def test_constant(self, grid2d):
        assert cell_average(Field(grid2d, np.full(grid2d.shape, 4.2))) == pytest.approx(4.2)

    def test_pure_mode(self, grid1d):
        x = grid1d.coordinate_axes()[0].ravel()
        assert abs(cell_average(Field(grid1d, np.sin(2 * np.pi * x)))) < 1e-14

    def test_laminate_homogenized_flux(self):
        grid = torus.TorusGrid(1, 1024)
        a = coefficient_from_spec(LAMINATE, grid)
        flux = a.values[:, 0, :]
        phi = solve_div_a_grad(a, flux.reshape((1,) + grid.shape))
        total = a.values[0, 0] * (gradient_values(grid, phi)[0] + 1.0)
        assert abs(total.mean() - 1.6) < 1e-8


class TestCoefficientField:
    def test_ellipticity_enforced(self, grid1d):
        bad = np.full((1, 1) + grid1d.shape, 0.5)
        with pytest.raises(ConfigurationError):
            CoefficientField(grid1d, bad)

    def test_symmetry_enforced(self, grid2d):
        vals = np.zeros((2, 2) + grid2d.shape)
        vals[0, 0] = vals[1, 1] = 2.0
        vals[0, 1] = 0.5
        with pytest.raises(ConfigurationError):
            CoefficientField(grid2d, vals)

    def test_bounds(self, smooth2d_a):
        assert smooth2d_a.ellipticity >= 1.0 - 1e-10
        assert smooth2d_a.Lambda == pytest.approx(3.0, abs=1e-6)

    def test_laminate_volume_fraction_exact(self, laminate_a):
        diag = laminate_a.values[0, 0]
        assert np.sum(diag == 1.0) == laminate_a.grid.n // 2
        assert np.sum(diag == 4.0) == laminate_a.grid.n // 2

    def test_raw_roundtrip(self, grid1d, laminate_a):
        again = coefficient_from_spec(
            {"kind": "raw", "values": laminate_a.values.tolist()}, grid1d)
        assert np.array_equal(again.values, laminate_a.values)


class TestProlongation:
    def test_exact_on_band_limited(self, grid2d, rng):
        f = band_limited(grid2d, rng, kmax=6)
        fine_grid = TorusGrid(2, grid2d.n * 2)
        coarse_on_fine = prolong_values(grid2d, f, 2)
        x, y = (np.broadcast_to(ax, fine_grid.shape)
                for ax in fine_grid.coordinate_axes())
        # compare against direct evaluation of two representative modes
        probe = np.cos(2 * np.pi * 3 * x) * np.sin(2 * np.pi * 2 * y)
        xc, yc = (np.broadcast_to(ax, grid2d.shape)
                  for ax in grid2d.coordinate_axes())
        probe_c = np.cos(2 * np.pi * 3 * xc) * np.sin(2 * np.pi * 2 * yc)
        assert np.max(np.abs(prolong_values(grid2d, probe_c, 2) - probe)) < 1e-12
        assert coarse_on_fine.shape == fine_grid.shape
        assert np.isrealobj(coarse_on_fine)
