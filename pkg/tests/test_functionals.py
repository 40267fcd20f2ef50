import math

import numpy as np
import pytest

from src.errors import ParameterError, StructuralError
from src.functionals import (
    QUADRATIC,
    ConeParams,
    action_density,
    bb_action,
    default_terminal_tol,
    kl_divergence,
    kl_dual_objective,
    objective_F,
    perspective_f,
    perspective_f2_array,
    recover_velocity,
)
from src.measures import DensityField, DensitySlice, GridSpec, MomentumField


@pytest.fixture
def four_cells():
    return GridSpec.from_bounds([0.0], [1.0], 4, 2)


def _constant_field(grid, values):
    return DensityField(grid, np.tile(np.asarray(values, dtype=float), (grid.n_time + 1, 1)))


def _interior_flux(grid, value):
    comp = np.full((grid.n_time,) + grid.face_shape(0), float(value))
    comp[:, 0] = comp[:, -1] = 0.0
    return MomentumField(grid, (comp,))


class TestPerspective:
    def test_conjugate_exponent(self):
        assert QUADRATIC.q == 2.0
        assert ConeParams(3.0).q == pytest.approx(1.5)

    def test_rejects_exponent_below_one(self):
        with pytest.raises(ParameterError):
            ConeParams(1.0)

    def test_values(self):
        assert perspective_f(QUADRATIC, 1.0, [2.0, 0.0]) == 2.0
        assert perspective_f(QUADRATIC, 0.0, [0.0, 0.0]) == 0.0
        assert math.isinf(perspective_f(QUADRATIC, -1.0, [1.0, 0.0]))
        assert math.isinf(perspective_f(QUADRATIC, 0.0, [1e-3]))

    def test_array_form_matches_scalar(self, rng):
        t = np.concatenate([rng.random(20), [0.0, 0.0, -0.5]])
        x = np.concatenate([rng.normal(size=(20, 2)), [[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]]])
        expected = [perspective_f(QUADRATIC, ti, xi) for ti, xi in zip(t, x)]
        np.testing.assert_allclose(perspective_f2_array(t, x), expected, rtol=1e-15, atol=0.0)

    def test_convex_along_segments(self, rng):
        for _ in range(200):
            t1, t2 = rng.uniform(0.01, 2.0, size=2)
            x1, x2 = rng.normal(size=(2, 3))
            lam = rng.random()
            mixed = perspective_f(QUADRATIC, lam * t1 + (1 - lam) * t2, lam * x1 + (1 - lam) * x2)
            bound = lam * perspective_f(QUADRATIC, t1, x1) + (1 - lam) * perspective_f(QUADRATIC, t2, x2)
            assert mixed <= bound + 1e-12


class TestAction:
    def test_zero_momentum(self, coarse_pair):
        rho = DensityField.linear_interpolation(*coarse_pair)
        assert bb_action(rho, MomentumField.zeros(rho.grid)) == 0.0

    def test_constant_velocity_on_unit_density(self, coarse_grid):
        c = 0.7
        rho_mid = np.ones((coarse_grid.n_time,) + coarse_grid.shape)
        m_mid = np.full(rho_mid.shape + (1,), c)
        value = action_density(rho_mid, m_mid, coarse_grid.cell_volume, coarse_grid.dt)
        assert value == pytest.approx(0.5 * c * c * coarse_grid.horizon, rel=1e-12)

    def test_kinetic_energy_identity(self, coarse_grid, rng):
        rho_mid = rng.uniform(0.5, 1.5, (coarse_grid.n_time,) + coarse_grid.shape)
        v = rng.normal(size=rho_mid.shape + (1,))
        action = action_density(rho_mid, v * rho_mid[..., None], coarse_grid.cell_volume, coarse_grid.dt)
        kinetic = float(np.sum(0.5 * v[..., 0] ** 2 * rho_mid)) * coarse_grid.cell_volume * coarse_grid.dt
        assert action == pytest.approx(kinetic, abs=1e-10)

    def test_flux_through_empty_cell_is_infinite(self, coarse_grid):
        values = np.ones(coarse_grid.shape)
        values[5] = 0.0
        values *= 1.0 / (values.sum() * coarse_grid.cell_volume)
        rho = _constant_field(coarse_grid, values)
        assert math.isinf(bb_action(rho, _interior_flux(coarse_grid, 0.3)))

    def test_grid_mismatch(self, coarse_pair, line_grid):
        rho = DensityField.linear_interpolation(*coarse_pair)
        with pytest.raises(StructuralError):
            bb_action(rho, MomentumField.zeros(line_grid))


class TestKL:
    def test_two_cell_masses(self, four_cells):
        p = DensitySlice(four_cells, [2.0, 2.0, 0.0, 0.0])
        q = DensitySlice(four_cells, [1.0, 3.0, 0.0, 0.0])
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
        assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-12)
        assert kl_divergence(p, q) == pytest.approx(0.14384, abs=1e-5)

    def test_self_divergence_is_zero(self, coarse_pair):
        assert kl_divergence(coarse_pair[0], coarse_pair[0]) == 0.0

    def test_missing_support_is_infinite(self, four_cells):
        p = DensitySlice(four_cells, [1.0, 1.0, 1.0, 1.0])
        q = DensitySlice(four_cells, [2.0, 2.0, 0.0, 0.0])
        assert math.isinf(kl_divergence(p, q))

    def test_nonnegative(self, coarse_pair):
        assert kl_divergence(*coarse_pair) > 0.0
        assert kl_divergence(coarse_pair[1], coarse_pair[0]) > 0.0


class TestKLDual:
    def test_zero_test_function(self, coarse_pair):
        assert kl_dual_objective(*coarse_pair, np.zeros(16)) == pytest.approx(0.0, abs=1e-14)

    def test_log_ratio_attains_divergence(self, coarse_pair):
        p, q = coarse_pair
        h = np.log(p.values / q.values)
        assert kl_dual_objective(p, q, h) == pytest.approx(kl_divergence(p, q), abs=1e-9)

    def test_random_test_functions_stay_below(self, coarse_pair, rng):
        p, q = coarse_pair
        kl = kl_divergence(p, q)
        for _ in range(100):
            assert kl_dual_objective(p, q, rng.normal(scale=2.0, size=16)) <= kl + 1e-9

    def test_rejects_infinite_test_function(self, coarse_pair):
        h = np.zeros(16)
        h[3] = np.inf
        with pytest.raises(ParameterError):
            kl_dual_objective(*coarse_pair, h)


class TestObjective:
    def test_exact_terminal_and_no_flow(self, coarse_pair):
        rho0, _ = coarse_pair
        rho = DensityField.linear_interpolation(rho0, rho0)
        assert objective_F(rho, MomentumField.zeros(rho.grid), rho0, 5.0) == 0.0

    def test_hard_constraint_violation(self, coarse_pair):
        rho0, rho1 = coarse_pair
        rho = DensityField.linear_interpolation(rho0, rho0)
        assert math.isinf(objective_F(rho, MomentumField.zeros(rho.grid), rho1, math.inf))

    def test_hard_constraint_inside_tolerance(self, coarse_pair):
        rho0, rho1 = coarse_pair
        rho = DensityField.linear_interpolation(rho0, rho1)
        assert objective_F(rho, MomentumField.zeros(rho.grid), rho1, math.inf) == 0.0

    def test_linear_in_alpha(self, coarse_pair):
        rho0, rho1 = coarse_pair
        rho = DensityField.linear_interpolation(rho0, rho0)
        m = MomentumField.zeros(rho.grid)
        k = kl_divergence(rho0, rho1)
        diff = objective_F(rho, m, rho1, 10.0) - objective_F(rho, m, rho1, 1.0)
        assert diff == pytest.approx(9.0 * k, abs=1e-10)

    def test_nonpositive_terminal_tol(self, coarse_pair):
        rho0, rho1 = coarse_pair
        rho = DensityField.linear_interpolation(rho0, rho1)
        with pytest.raises(ParameterError):
            objective_F(rho, MomentumField.zeros(rho.grid), rho1, math.inf, terminal_tol=0.0)

    def test_default_tolerance_scales_with_grid(self, coarse_grid):
        assert default_terminal_tol(coarse_grid) == pytest.approx(1e-6)


class TestVelocity:
    def test_interior_cells_recover_ratio(self, coarse_grid):
        rho = _constant_field(coarse_grid, np.ones(coarse_grid.shape))
        v = recover_velocity(rho, _interior_flux(coarse_grid, 2.0), floor=1e-12)
        np.testing.assert_allclose(v[:, 1:-1, 0], 2.0)
        np.testing.assert_allclose(v[:, [0, -1], 0], 1.0)

    def test_floor_zeroes_velocity(self, coarse_grid):
        values = np.ones(coarse_grid.shape)
        values[4:8] = 0.0
        values *= 1.0 / (values.sum() * coarse_grid.cell_volume)
        rho = _constant_field(coarse_grid, values)
        v = recover_velocity(rho, _interior_flux(coarse_grid, 0.5), floor=1e-9)
        assert np.all(v[:, 4:8] == 0.0)

    def test_reconstruction_error_bounded_by_floor(self, coarse_grid, coarse_pair):
        floor = 1e-3
        rho = DensityField.linear_interpolation(*coarse_pair)
        m = _interior_flux(coarse_grid, 0.01)
        v = recover_velocity(rho, m, floor)
        rho_mid = 0.5 * (rho.values[1:] + rho.values[:-1])
        err = float(np.abs(rho_mid[..., None] * v - m.centered()).sum()) * coarse_grid.cell_volume
        assert err < floor * coarse_grid.box.volume * coarse_grid.dim + 1e-12

    def test_rejects_nonpositive_floor(self, coarse_pair):
        rho = DensityField.linear_interpolation(*coarse_pair)
        with pytest.raises(ParameterError):
            recover_velocity(rho, MomentumField.zeros(rho.grid), 0.0)
