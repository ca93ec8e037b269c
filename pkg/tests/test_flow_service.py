"""
Tests for the mean-field Langevin flow and the flat Hamiltonian derivatives
"""
import pytest

import numpy as np

from models.exceptions import NumericalAbort, ShapeMismatchError
from models.numerics import TraceRow
from models.pydantic_models import FlowConfig
from services.diagnostics_service import DiagnosticsService
from services.flow_service import FlowService
from services.measure_service import MeasureService
from services.noise_service import NoiseService
from storage.schemas import FLOW_TRACE_COLUMNS


def test_flat_hamiltonian_gradient_of_lq_problem(lq_spec):
    cloud = np.random.default_rng(0).standard_normal((8, 1))
    # ∇_a δH⁰/δm = c·y + r·a
    grad = FlowService.flat_hamiltonian_gradient(lq_spec, [0.3], [2.0], cloud, [0.5])
    np.testing.assert_almost_equal(grad, [2.5])
    probes = np.array([[-1.0], [0.0], [1.0]])
    grads = FlowService.flat_hamiltonian_gradient(lq_spec, [0.3], [2.0], cloud, probes)
    np.testing.assert_almost_equal(grads, [[1.0], [2.0], [3.0]])


def test_flat_hamiltonian_value_is_centered(lq_spec):
    cloud = np.random.default_rng(1).standard_normal((8, 1))
    values = FlowService.flat_hamiltonian_value(lq_spec, [0.0], [1.5], cloud, cloud)
    np.testing.assert_almost_equal(values.mean(), 0.0)


def test_flat_hamiltonian_sigma_with_supplied_density(lq_spec):
    cloud = np.random.default_rng(2).standard_normal((8, 1))
    value = FlowService.flat_hamiltonian_value(lq_spec, [0.0], [1.0], cloud, [0.5])
    sigma_value = FlowService.flat_hamiltonian_sigma(
        lq_spec, [0.0], [1.0], cloud, [0.5], 2.0, kde_logdensity=lambda probes: np.full(len(probes), -1.0)
    )
    expected = value + 2.0 * (lq_spec.prior_potential(np.array([0.5])) - 1.0 + 1.0)
    np.testing.assert_almost_equal(sigma_value, expected)


def test_flat_hamiltonian_sigma_needs_two_particles(lq_spec):
    with pytest.raises(ShapeMismatchError):
        FlowService.flat_hamiltonian_sigma(lq_spec, [0.0], [1.0], np.zeros((1, 1)), [0.5], 1.0)


def test_drift_only_langevin_step(lq_spec, noise, control):
    config = FlowConfig(sigma=0.0, ds=0.1, total_s=0.1)
    state = FlowService.initial_state(lq_spec, config, noise, control, 0.0)
    stepped = FlowService.langevin_step(state, lq_spec, config)
    # Y = 1, so every particle moves by -ds·(c + r·θ)
    np.testing.assert_almost_equal(stepped.control.theta, control.theta - 0.1 * (1.0 + control.theta))
    assert stepped.step == 1
    np.testing.assert_almost_equal(stepped.s, 0.1)


def test_langevin_step_is_keyed_by_seed_and_counter(lq_spec, noise, control, flow_config):
    state = FlowService.initial_state(lq_spec, flow_config, noise, control, 0.0)
    first = FlowService.langevin_step(state, lq_spec, flow_config)
    again = FlowService.langevin_step(state, lq_spec, flow_config)
    other = FlowService.langevin_step(state, lq_spec, flow_config.model_copy(update={"inner_seed": 99}))
    np.testing.assert_equal(first.control.theta, again.control.theta)
    assert not np.allclose(first.control.theta, other.control.theta)


def test_langevin_overflow_reports_particle(lq_spec, noise, control):
    config = FlowConfig(sigma=0.0, ds=1e308, total_s=0.0)
    state = FlowService.initial_state(lq_spec, config, noise, control, 0.0)
    with pytest.raises(NumericalAbort) as error:
        next(FlowService.iterate_flow(lq_spec, config, noise, state, 0.0, 1))
    assert error.value.stage == "langevin step"
    assert set(error.value.location) == {"s", "j", "k", "i"}
    assert error.value.location["s"] == 0.0


def test_frozen_costate_langevin_matches_discrete_ou_law(lq_spec, grid):
    noise = NoiseService.sample_brownian(7, grid, 4, 1)
    control = MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 4, 200, 7)
    config = FlowConfig(sigma=1.0, ds=0.01, total_s=5.0, inner_seed=8)
    state = FlowService.initial_state(lq_spec, config, noise, control, 0.0)
    for _ in range(500):
        state = FlowService.langevin_step(state, lq_spec, config)
    theta = state.control.theta.ravel()
    # θ ← θ - ds(1 + 1.5θ) + √ds ξ is an AR(1) with mean -2/3
    contraction = 1.0 - 1.5 * config.ds
    variance = config.ds / (1.0 - contraction**2)
    assert abs(theta.mean() + 2.0 / 3.0) < 4.0 * np.sqrt(variance / theta.size)
    assert abs(theta.var() - variance) < 4.0 * variance * np.sqrt(2.0 / theta.size)


def test_gibbs_reference_is_stationary_under_flow(lq_params, lq_spec, grid, noise, flow_config):
    reference = DiagnosticsService.lq_gibbs_reference(lq_params, 1.0, grid, 16, 64, 11)
    config = flow_config.model_copy(update={"total_s": 0.2})
    state = FlowService.initial_state(lq_spec, config, noise, reference, 0.0)
    for state in FlowService.iterate_flow(lq_spec, config, noise, state, 0.0, config.n_steps):
        pass
    before, after = reference.theta.ravel(), state.control.theta.ravel()
    n = before.size
    mean_band = 3.0 * np.hypot(before.std() / np.sqrt(n), after.std() / np.sqrt(n))
    var_band = 3.0 * np.hypot(before.var(), after.var()) * np.sqrt(2.0 / n)
    assert abs(after.mean() - before.mean()) < mean_band
    assert abs(after.var() - before.var()) < var_band


def test_trace_checkpoints(lq_spec, noise, control, flow_config):
    checkpoint = DiagnosticsService.checkpointer(lq_spec, flow_config, noise, 0.0)
    trace, state = FlowService.run_flow(lq_spec, flow_config, noise, control, 0.0, checkpoint)
    # 10 steps with stride 5
    assert len(trace) == 3
    np.testing.assert_almost_equal(trace.column("s"), [0.0, 0.05, 0.1])
    assert state.step == 10
    assert np.all(np.isfinite(trace.column("J_sigma")))
    assert np.all(np.isfinite(trace.column("foc_spread")))
    assert np.all(np.isnan(trace.column("rho_to_ref")))
    assert len(FLOW_TRACE_COLUMNS) == len(vars(trace.rows[0]))


def test_run_flow_calls_supplied_checkpoint(lq_spec, noise, control, flow_config):
    seen = []

    def checkpoint(state):
        seen.append(state.step)
        return TraceRow(s=state.s, J_sigma=0.0, J_stderr=0.0, moment_q=0.0,
                        foc_spread=0.0, gibbs_residual=0.0, rho_to_ref=0.0)

    trace, _ = FlowService.run_flow(lq_spec, flow_config, noise, control, 0.0, checkpoint)
    assert seen == [0, 5, 10]
    np.testing.assert_almost_equal(trace.column("s"), [0.0, 0.05, 0.1])


def test_zero_horizon_records_initial_checkpoint(lq_spec, noise, control, flow_config):
    config = flow_config.model_copy(update={"total_s": 0.0})
    checkpoint = DiagnosticsService.checkpointer(lq_spec, config, noise, 0.0)
    trace, state = FlowService.run_flow(lq_spec, config, noise, control, 0.0, checkpoint)
    assert len(trace) == 1
    assert trace.last.s == 0.0
    np.testing.assert_equal(state.control.theta, control.theta)


def test_resumed_flow_matches_uninterrupted_flow(lq_spec, noise, control, flow_config):
    half = flow_config.model_copy(update={"total_s": 0.05})
    checkpoint = DiagnosticsService.checkpointer(lq_spec, flow_config, noise, 0.0)
    _, midway = FlowService.run_flow(lq_spec, half, noise, control, 0.0, checkpoint)
    _, resumed = FlowService.run_flow(lq_spec, half, noise, midway, 0.0, checkpoint)
    _, direct = FlowService.run_flow(lq_spec, flow_config, noise, control, 0.0, checkpoint)
    assert resumed.step == direct.step
    np.testing.assert_equal(resumed.control.theta, direct.control.theta)


def test_reference_distance_column(lq_spec, noise, control, flow_config):
    checkpoint = DiagnosticsService.checkpointer(lq_spec, flow_config, noise, 0.0, reference=control)
    trace, _ = FlowService.run_flow(lq_spec, flow_config, noise, control, 0.0, checkpoint)
    np.testing.assert_almost_equal(trace.rows[0].rho_to_ref, 0.0)
    assert trace.last.rho_to_ref > 0.0
