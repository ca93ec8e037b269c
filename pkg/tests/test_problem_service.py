"""
Tests for problem builders and their flat derivatives
"""
import pytest

import numpy as np
from pydantic import ValidationError

from models.exceptions import ProblemDefinitionError
from models.pydantic_models import LqParams
from services.problem_service import ProblemService


def nn_problem(activation="tanh"):
    coefficients = ProblemService.lq_policy_coefficients(LqParams(b=-0.5, c=1.0, q_run=1.0, r_run=0.5), 1)
    return ProblemService.build_nn_policy_problem(coefficients, activation)


def clouds(seed, batch, count, dim, loc=0.0):
    return loc + np.random.default_rng(seed).standard_normal((batch, count, dim))


def test_lq_problem_coefficients(lq_spec):
    t = np.zeros(2)
    x = np.array([[1.0], [-2.0]])
    m = np.array([[[0.5], [1.5]], [[-1.0], [1.0]]])
    np.testing.assert_almost_equal(lq_spec.drift(t, x, m), [[1.0], [0.0]])
    np.testing.assert_almost_equal(lq_spec.running_cost(t, x, m), [0.5 * 1.25, 0.5])
    np.testing.assert_almost_equal(lq_spec.terminal_cost(x), [1.0, -2.0])
    np.testing.assert_almost_equal(lq_spec.grad_x_terminal(x), [[1.0], [1.0]])
    np.testing.assert_equal(lq_spec.diffusion, [[1.0]])


def test_lq_params_reject_non_convex_action_cost():
    with pytest.raises(ValidationError):
        LqParams(r_run=0.0)
    with pytest.raises(ProblemDefinitionError):
        ProblemService.build_lq_problem(LqParams.model_construct(r_run=-1.0))


def test_costate_is_control_free(lq_params, stress_params):
    assert lq_params.costate_is_control_free
    assert not stress_params.costate_is_control_free


@pytest.mark.parametrize("kappa, lam", [(0.0, 0.0), (0.5, 0.0), (0.5, 2.0)])
def test_lq_flat_derivative_identity(lq_params, kappa, lam):
    spec = ProblemService.add_convex_interaction(ProblemService.build_lq_problem(lq_params), kappa, lam)
    m = clouds(0, 1, 16, 1)[0]
    m_prime = clouds(1, 1, 16, 1, loc=1.0)[0]
    assert ProblemService.check_flat_derivative(spec, m, m_prime, t=0.3, x=[0.7]) < 1e-10


def test_nn_flat_derivative_identity():
    spec = nn_problem()
    m = clouds(2, 1, 12, 2)[0]
    m_prime = clouds(3, 1, 12, 2, loc=0.5)[0]
    # the control mean is linear in m and F is quadratic in it, so the midpoint rule is exact
    assert ProblemService.check_flat_derivative(spec, m, m_prime, t=0.0, x=[0.4]) < 1e-10


def test_flat_derivatives_are_centered(lq_params):
    spec = ProblemService.add_convex_interaction(ProblemService.build_lq_problem(lq_params), 0.3, 0.7)
    t, x = np.zeros(3), np.ones((3, 1))
    m = clouds(4, 3, 20, 1)
    np.testing.assert_almost_equal(spec.flat_cost(t, x, m, m).mean(axis=1), np.zeros(3))
    np.testing.assert_almost_equal(spec.flat_drift(t, x, m, m).mean(axis=1), np.zeros((3, 1)))


@pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
def test_nn_action_gradients_match_central_differences(activation):
    spec = nn_problem(activation)
    t, x = np.zeros(2), np.array([[0.3], [-1.1]])
    m = clouds(5, 2, 10, 2)
    a = clouds(6, 2, 4, 2)
    np.testing.assert_almost_equal(
        spec.flat_cost_agrad(t, x, m, a), ProblemService.central_difference_agrad(spec.flat_cost, t, x, m, a), decimal=6
    )
    numeric_drift = ProblemService.central_difference_agrad(spec.flat_drift, t, x, m, a)
    np.testing.assert_almost_equal(spec.flat_drift_agrad(t, x, m, a), numeric_drift, decimal=6)


def test_nn_state_gradients_match_central_differences():
    spec = nn_problem()
    t, x = np.zeros(2), np.array([[0.3], [-1.1]])
    m = clouds(7, 2, 10, 2)
    np.testing.assert_almost_equal(
        spec.grad_x_drift(t, x, m), ProblemService.central_difference_x(lambda z: spec.drift(t, z, m), x), decimal=6
    )
    np.testing.assert_almost_equal(
        spec.grad_x_cost(t, x, m), ProblemService.central_difference_x(lambda z: spec.running_cost(t, z, m), x), decimal=6
    )


def test_bump_derivative_approaches_flat_derivative(lq_params):
    spec = ProblemService.add_convex_interaction(ProblemService.build_lq_problem(lq_params), 0.0, 1.0)
    t, x = np.zeros(1), np.zeros((1, 1))
    m = clouds(8, 1, 2000, 1)
    a = np.array([[[-1.0], [0.5], [2.0]]])
    bumped = ProblemService.bump_flat_derivative(spec.running_cost, t, x, m, a)
    np.testing.assert_almost_equal(bumped, spec.flat_cost(t, x, m, a), decimal=2)


def test_identity_activation_problem():
    coefficients = ProblemService.lq_policy_coefficients(LqParams(dim=2), 2)
    spec = ProblemService.build_nn_policy_problem(coefficients, "identity", action_dim=2)
    assert spec.action_dim == 2
    t, x = np.zeros(1), np.zeros((1, 2))
    m = clouds(9, 1, 5, 2)
    np.testing.assert_almost_equal(spec.drift(t, x, m), m.mean(axis=1))


@pytest.mark.parametrize("activation", ["relu", "softplus"])
def test_rejected_activations(activation):
    with pytest.raises(ProblemDefinitionError):
        nn_problem(activation)


def test_ridge_activation_needs_state_plus_bias_parameters():
    coefficients = ProblemService.lq_policy_coefficients(LqParams(), 1)
    with pytest.raises(ProblemDefinitionError):
        ProblemService.build_nn_policy_problem(coefficients, "tanh", action_dim=3)


def test_policy_coefficients_reject_control_dimension():
    with pytest.raises(ProblemDefinitionError):
        ProblemService.lq_policy_coefficients(LqParams(dim=3), 2)


def test_interaction_weights(lq_spec):
    with pytest.raises(ProblemDefinitionError):
        ProblemService.add_convex_interaction(lq_spec, -0.1, 0.0)
    assert ProblemService.add_convex_interaction(lq_spec, 0.0, 0.0) is lq_spec
    twice = ProblemService.add_convex_interaction(ProblemService.add_convex_interaction(lq_spec, 0.5, 0.0), 0.25, 1.0)
    assert twice.interaction.kappa == 0.75
    assert twice.interaction.lam == 1.0
    assert twice.lq_params == lq_spec.lq_params
