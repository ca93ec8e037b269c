"""
Tests for objective estimates and the directional-derivative identity
"""
import math

import pytest

import numpy as np

from models.exceptions import ConfigError, ShapeMismatchError
from services.measure_service import MeasureService
from services.noise_service import NoiseService
from services.objective_service import MixedControl, ObjectiveService
from services.problem_service import ProblemService


@pytest.fixture
def shifted(grid):
    return MeasureService.init_control(MeasureService.gaussian_sampler(0.5, 0.7), grid, 16, 32, 77)


@pytest.mark.parametrize("epsilon", [0.0, 1.0, -0.2])
def test_mixed_control_rejects_epsilon(control, epsilon):
    with pytest.raises(ConfigError):
        MixedControl(control, control, epsilon)


def test_mixed_control_rejects_shape_mismatch(grid, control):
    other = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 16, 8, 0)
    with pytest.raises(ShapeMismatchError):
        MixedControl(control, other, 0.5)


def test_mixed_control_realizes_the_mixture(control, shifted):
    mixed = MixedControl(control, shifted, 0.25)
    assert mixed.mixture_size == 128
    cloud = mixed.node_cloud(2)
    np.testing.assert_equal(cloud.shape, (16, 128, 1))
    np.testing.assert_equal(cloud[:, -32:], shifted.theta[:, 2])
    expected = 0.75 * control.theta[:, 2].mean(axis=1) + 0.25 * shifted.theta[:, 2].mean(axis=1)
    np.testing.assert_almost_equal(cloud.mean(axis=1), expected)


def test_hamiltonian_value(lq_spec):
    cloud = np.array([[-1.0], [1.0]])
    # b·x + c·mean = 0, tr(Γᵀz) = 0.2, F = r/2·mean(a²) = 0.5
    np.testing.assert_almost_equal(ObjectiveService.hamiltonian_value(lq_spec, 0.0, [0.3], [1.0], [[0.2]], cloud, 0.0), 0.7)


def test_objective_of_point_mass_control(lq_spec, grid, noise):
    control = MeasureService.init_control(MeasureService.point_mass_sampler(0.5), grid, 16, 4, 0)
    estimate = ObjectiveService.evaluate_objective(lq_spec, control, noise, 0.0, 0.0)
    # ∫ r/2·a² dt + E[X_T] with X_T = c·a·T + W_T
    expected = 0.125 + 0.5 + noise.increments[..., 0].sum(axis=1).mean()
    np.testing.assert_almost_equal(estimate.estimate, expected)
    assert not estimate.entropy_infinite


def test_objective_is_infinite_on_degenerate_clouds(lq_spec, grid, noise):
    control = MeasureService.init_control(MeasureService.point_mass_sampler(0.5), grid, 16, 4, 0)
    estimate = ObjectiveService.evaluate_objective(lq_spec, control, noise, 0.0, 1.0)
    assert estimate.entropy_infinite
    assert estimate.estimate == math.inf


def test_entropy_term_on_a_path_subset(lq_spec, noise, control):
    costs = ObjectiveService.path_costs(lq_spec, control, noise, 0.0, 0.0)
    full = ObjectiveService.evaluate_objective(lq_spec, control, noise, 0.0, 1.0)
    every = ObjectiveService.evaluate_objective(lq_spec, control, noise, 0.0, 1.0, entropy_paths=16)
    subset = ObjectiveService.evaluate_objective(lq_spec, control, noise, 0.0, 1.0, entropy_paths=4)
    assert every == full
    entropy_all = ObjectiveService.entropy_costs(lq_spec, control, 1.0, 16)
    entropy_four = ObjectiveService.entropy_costs(lq_spec, control, 1.0, 4)
    np.testing.assert_almost_equal(full.estimate, costs.mean() + entropy_all.mean(), decimal=10)
    np.testing.assert_almost_equal(subset.estimate, costs.mean() + entropy_four.mean(), decimal=10)
    assert subset.stderr >= costs.std(ddof=1) / 4.0


def test_finite_difference_vanishes_for_equal_controls(lq_spec, noise, control):
    result = ObjectiveService.directional_derivative_fd(lq_spec, control, control, noise, 0.0, 0.1)
    assert result.estimate == 0.0
    assert result.stderr == 0.0


def test_mixture_weight_is_the_realized_fraction(control, shifted):
    assert MixedControl(control, shifted, 0.25).weight == 0.25
    # round(32 / 0.9) = 36 particles per node
    np.testing.assert_almost_equal(MixedControl(control, shifted, 0.9).weight, 32 / 36)


@pytest.mark.parametrize("epsilon", [0.125, 0.3, 0.9])
def test_derivative_identity_on_linear_instance(lq_spec, noise, control, shifted, epsilon):
    # J⁰ is affine in the measure here, so the finite difference is exact
    fd = ObjectiveService.directional_derivative_fd(lq_spec, control, shifted, noise, 0.0, epsilon)
    pairing = ObjectiveService.hamiltonian_pairing(lq_spec, control, shifted, noise, 0.0)
    np.testing.assert_almost_equal(fd.estimate, pairing.estimate, decimal=8)


def test_derivative_identity_on_nonlinear_instance(stress_params):
    spec = ProblemService.build_lq_problem(stress_params)
    grid = NoiseService.make_time_grid(1.0, 20)
    noise = NoiseService.sample_brownian(21, grid, 32, 1)
    rng = np.random.default_rng(21)
    for _ in range(3):
        nu_mean, mu_mean = rng.uniform(-1.0, 1.0, size=2)
        nu = MeasureService.init_control(MeasureService.gaussian_sampler(nu_mean, 1.0), grid, 32, 16, int(rng.integers(1_000)))
        mu = MeasureService.init_control(MeasureService.gaussian_sampler(mu_mean, 0.6), grid, 32, 16, int(rng.integers(1_000)))
        fd = ObjectiveService.directional_derivative_fd(spec, nu, mu, noise, 0.0, 1e-3)
        pairing = ObjectiveService.hamiltonian_pairing(spec, nu, mu, noise, 0.0)
        gap, band = ObjectiveService.identity_gap(fd, pairing)
        assert gap <= band


def test_derivative_identity_with_interaction(lq_spec, noise, control, shifted):
    spec = ProblemService.add_convex_interaction(lq_spec, 0.5, 1.0)
    fd = ObjectiveService.directional_derivative_fd(spec, control, shifted, noise, 0.0, 1e-3)
    pairing = ObjectiveService.hamiltonian_pairing(spec, control, shifted, noise, 0.0)
    gap, band = ObjectiveService.identity_gap(fd, pairing)
    assert gap <= band
    assert gap < 1e-3


def test_pairing_rejects_mismatched_controls(lq_spec, noise, control):
    other_grid = NoiseService.make_time_grid(1.0, 4)
    other = MeasureService.init_control(MeasureService.gaussian_sampler(), other_grid, 16, 32, 0)
    with pytest.raises(ShapeMismatchError):
        ObjectiveService.hamiltonian_pairing(lq_spec, control, other, noise, 0.0)
