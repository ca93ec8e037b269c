"""
Tests for particle controls, Wasserstein distances and entropy estimates
"""
import math

import pytest

import numpy as np

from models.exceptions import ShapeMismatchError
from models.numerics import ParticleControl
from services.measure_service import MeasureService
from services.noise_service import NoiseService
from services.problem_service import ProblemService
from storage.csv_io import read_header, read_rows

U = ProblemService.gaussian_prior_potential


def gaussian_density(grid, mean, std):
    return np.exp(-0.5 * ((grid - mean) / std) ** 2) / (std * math.sqrt(2.0 * math.pi))


def gaussian_kl(mean, variance):
    return 0.5 * (variance + mean**2 - 1.0 - math.log(variance))


def test_init_control_shape_and_determinism(grid):
    first = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 3, 8, 42, action_dim=2)
    second = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 3, 8, 42, action_dim=2)
    np.testing.assert_equal(first.theta.shape, (3, grid.steps, 8, 2))
    np.testing.assert_equal(first.theta, second.theta)


def test_init_control_paths_do_not_depend_on_outer_count(grid):
    small = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 2, 8, 42)
    large = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 5, 8, 42)
    np.testing.assert_equal(large.theta[:2], small.theta)


def test_point_mass_initialization(grid):
    control = MeasureService.init_control(MeasureService.point_mass_sampler(0.5), grid, 2, 4, 0)
    np.testing.assert_equal(control.theta, 0.5)


def test_rho_of_identical_controls_is_zero(control):
    np.testing.assert_almost_equal(MeasureService.rho_q(control, control), 0.0)


@pytest.mark.parametrize("shift", [0.5, 2.0])
@pytest.mark.parametrize("q", [2.0, 3.0])
def test_rho_of_shifted_control(grid, shift, q):
    base = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 4, 16, 9, q_metric=q)
    shifted = base.with_theta(base.theta + shift)
    # W_q between a 1D cloud and its translate is the shift; T = 1
    np.testing.assert_almost_equal(MeasureService.rho_q(base, shifted), shift)
    np.testing.assert_almost_equal(MeasureService.wasserstein_qT(base, shifted, 2), shift)


def test_rho_is_symmetric_and_satisfies_triangle_inequality(grid):
    sampler = MeasureService.gaussian_sampler()
    a = MeasureService.init_control(sampler, grid, 4, 16, 1)
    b = MeasureService.init_control(MeasureService.gaussian_sampler(1.0, 2.0), grid, 4, 16, 2)
    c = MeasureService.init_control(MeasureService.gaussian_sampler(-1.0, 0.5), grid, 4, 16, 3)
    np.testing.assert_almost_equal(MeasureService.rho_q(a, b), MeasureService.rho_q(b, a))
    assert MeasureService.rho_q(a, c) <= MeasureService.rho_q(a, b) + MeasureService.rho_q(b, c) + 1e-12


def test_rho_rejects_incompatible_controls(grid):
    a = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 2, 8, 0)
    other_grid = NoiseService.make_time_grid(2.0, grid.steps)
    b = ParticleControl(theta=a.theta.copy(), grid=other_grid)
    with pytest.raises(ShapeMismatchError):
        MeasureService.rho_q(a, b)
    c = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 2, 6, 0)
    with pytest.raises(ShapeMismatchError):
        MeasureService.rho_q(a, c)


def test_sliced_distance_of_identical_clouds_is_zero():
    rng = np.random.default_rng(0)
    clouds = rng.standard_normal((3, 20, 2))
    np.testing.assert_almost_equal(MeasureService.node_wasserstein_pow(clouds, clouds, 2.0), np.zeros(3))


def test_entropy_of_prior_sample_is_near_zero():
    rng = np.random.default_rng(1)
    cloud = rng.standard_normal((4096, 1))
    assert abs(MeasureService.entropy_estimate(cloud, U)) < 0.02


def test_entropy_of_gaussian_matches_closed_form():
    rng = np.random.default_rng(2)
    mean, variance = -2.0 / 3.0, 1.0 / 3.0
    cloud = mean + math.sqrt(variance) * rng.standard_normal((4096, 1))
    np.testing.assert_almost_equal(gaussian_kl(mean, variance), 0.4382, decimal=4)
    assert abs(MeasureService.entropy_estimate(cloud, U) - gaussian_kl(mean, variance)) < 0.05


def test_entropy_sentinel_for_degenerate_cloud():
    assert MeasureService.entropy_estimate(np.full((10, 1), 0.3), U) == math.inf


def test_entropy_needs_two_particles():
    with pytest.raises(ShapeMismatchError):
        MeasureService.entropy_estimate(np.zeros((1, 1)), U)


def test_entropy_quadrature_matches_closed_form():
    grid = np.linspace(-12.0, 12.0, 6001)
    density = gaussian_density(grid, 1.0, 0.5)
    np.testing.assert_almost_equal(MeasureService.entropy_quadrature(density, grid, U), gaussian_kl(1.0, 0.25), decimal=6)


def test_entropy_directional_derivative():
    grid = np.linspace(-12.0, 12.0, 6001)
    nu = gaussian_density(grid, 0.0, 1.2)
    mu = gaussian_density(grid, 0.5, 0.8)
    epsilon = 1e-5
    mixed = nu + epsilon * (mu - nu)
    finite_difference = (
        MeasureService.entropy_quadrature(mixed, grid, U) - MeasureService.entropy_quadrature(nu, grid, U)
    ) / epsilon
    pairing = MeasureService.entropy_flat_pairing(nu, mu, grid, U)
    assert abs(finite_difference - pairing) < 1e-3


def test_cloud_moments(grid):
    control = MeasureService.init_control(MeasureService.point_mass_sampler(2.0), grid, 2, 4, 0)
    per_node, aggregate = MeasureService.cloud_moments(control, 2.0)
    np.testing.assert_equal(per_node.shape, (2, grid.steps))
    np.testing.assert_almost_equal(aggregate, 4.0)


def test_export_clouds(tmp_path, grid):
    control = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 2, 3, 0, action_dim=2)
    path = tmp_path / "clouds.csv"
    count = MeasureService.export_clouds(control, path)

    assert count == 2 * grid.steps * 3
    assert read_header(path) == ["j", "k", "i", "a_1", "a_2"]
    rows = read_rows(path)
    assert [(row["j"], row["k"], row["i"]) for row in rows[:4]] == [(0, 0, 0), (0, 0, 1), (0, 0, 2), (0, 1, 0)]
    np.testing.assert_equal(rows[-1]["a_2"], control.theta[1, -1, 2, 1])
