"""
Flow Service for the relaxed-control solver
Mean-field Langevin dynamics of the particle control in algorithmic time s, with the
forward state and adjoint refreshed as the control moves
"""

import math
from typing import Callable, Iterator, Optional, Tuple, Union

import numpy as np
from loguru import logger

from models.exceptions import NumericalAbort, ShapeMismatchError
from models.numerics import (
    BrownianBundle,
    EmpiricalCloud,
    FlowState,
    FlowTrace,
    ParticleControl,
    TraceRow,
)
from models.problem import Array, ProblemSpec
from models.pydantic_models import FlowConfig
from services.forward_backward_service import ForwardBackwardService
from services.measure_service import MeasureService
from services.noise_service import NoiseService

Cloud = Union[EmpiricalCloud, Array]
Checkpoint = Callable[[FlowState], TraceRow]


class FlowService:
    """Service class for the mean-field Langevin flow"""

    # Configuration
    LOG_DENSITY_FLOOR = -690.0

    # ------------------------------------------------------------------
    # Flat derivatives of the Hamiltonian, batched over (path, node) rows
    # ------------------------------------------------------------------

    @staticmethod
    def batch_flat_hamiltonian_value(spec: ProblemSpec, t: Array, x: Array, y: Array, clouds: Array, probes: Array) -> Array:
        """δH⁰/δm = δΦ/δm·y + δF/δm at probe actions, (B, L)"""
        drift_part = np.einsum("bld,bd->bl", spec.flat_drift(t, x, clouds, probes), y)
        return drift_part + spec.flat_cost(t, x, clouds, probes)

    @staticmethod
    def batch_flat_hamiltonian_gradient(
        spec: ProblemSpec, t: Array, x: Array, y: Array, clouds: Array, probes: Array
    ) -> Array:
        """∇_a δH⁰/δm = (∇_a δΦ/δm)ᵀ y + ∇_a δF/δm at probe actions, (B, L, p)"""
        drift_part = np.einsum("bldp,bd->blp", spec.flat_drift_agrad(t, x, clouds, probes), y)
        return drift_part + spec.flat_cost_agrad(t, x, clouds, probes)

    @classmethod
    def batch_flat_hamiltonian_sigma(
        cls,
        spec: ProblemSpec,
        t: Array,
        x: Array,
        y: Array,
        clouds: Array,
        probes: Array,
        sigma: float,
        log_density: Optional[Array] = None,
    ) -> Array:
        """
        δH^σ/δm = δH⁰/δm + (σ²/2)(U + log ν + 1) at probe actions, (B, L)

        log ν defaults to the KDE of each cloud at its probes and is floored at LOG_DENSITY_FLOOR.
        """
        value = cls.batch_flat_hamiltonian_value(spec, t, x, y, clouds, probes)
        if sigma == 0:
            return value
        if log_density is None:
            log_density = MeasureService.kde_log_density(clouds, probes)
        log_density = np.maximum(log_density, cls.LOG_DENSITY_FLOOR)
        return value + 0.5 * sigma**2 * (spec.prior_potential(probes) + log_density + 1.0)

    # ------------------------------------------------------------------
    # Single-point forms
    # ------------------------------------------------------------------

    @staticmethod
    def _single(spec: ProblemSpec, x, y, cloud: Cloud, a, t: float) -> Tuple[Array, ...]:
        points = cloud.points if isinstance(cloud, EmpiricalCloud) else EmpiricalCloud(np.asarray(cloud, dtype=np.float64)).points
        probes = np.asarray(a, dtype=np.float64)
        single_probe = probes.ndim <= 1
        probes = probes.reshape(-1, spec.action_dim)
        return (
            np.array([float(t)]),
            np.asarray(x, dtype=np.float64).reshape(1, spec.state_dim),
            np.asarray(y, dtype=np.float64).reshape(1, spec.state_dim),
            points[None],
            probes[None],
            single_probe,
        )

    @classmethod
    def flat_hamiltonian_gradient(cls, spec: ProblemSpec, x, y, cloud: Cloud, a, t: float = 0.0) -> Array:
        """
        ∇_a δH⁰/δm(x, y, m, a) at one state

        Args:
            spec (ProblemSpec): Problem coefficients
            x: State in ℝ^d
            y: Costate in ℝ^d
            cloud: Measure argument (N, p)
            a: One action (p,) or probes (L, p)
            t (float): Time

        Returns:
            Array: (p,) for one action, (L, p) for probes
        """
        tt, xx, yy, clouds, probes, single = cls._single(spec, x, y, cloud, a, t)
        grad = cls.batch_flat_hamiltonian_gradient(spec, tt, xx, yy, clouds, probes)[0]
        return grad[0] if single else grad

    @classmethod
    def flat_hamiltonian_value(cls, spec: ProblemSpec, x, y, cloud: Cloud, a, t: float = 0.0):
        """δH⁰/δm(x, y, m, a) at one state; float for one action, (L,) for probes"""
        tt, xx, yy, clouds, probes, single = cls._single(spec, x, y, cloud, a, t)
        value = cls.batch_flat_hamiltonian_value(spec, tt, xx, yy, clouds, probes)[0]
        return float(value[0]) if single else value

    @classmethod
    def flat_hamiltonian_sigma(
        cls,
        spec: ProblemSpec,
        x,
        y,
        cloud: Cloud,
        a,
        sigma: float,
        kde_logdensity: Optional[Callable[[Array], Array]] = None,
        t: float = 0.0,
    ):
        """
        δH^σ/δm at one state, for diagnostics

        Args:
            kde_logdensity: log ν as a function of probes (L, p) -> (L,);
                the KDE of the cloud when omitted

        Returns:
            float for one action, (L,) for probes
        """
        tt, xx, yy, clouds, probes, single = cls._single(spec, x, y, cloud, a, t)
        if clouds.shape[1] < 2:
            raise ShapeMismatchError("flat_hamiltonian_sigma needs at least 2 particles")
        log_density = None if kde_logdensity is None else np.asarray(kde_logdensity(probes[0]), dtype=np.float64)[None]
        value = cls.batch_flat_hamiltonian_sigma(spec, tt, xx, yy, clouds, probes, sigma, log_density)[0]
        return float(value[0]) if single else value

    # ------------------------------------------------------------------
    # Flow
    # ------------------------------------------------------------------

    @staticmethod
    def node_rows(state: FlowState) -> Tuple[Array, Array, Array]:
        """Times, states and costates at the control nodes flattened to (M·K,) rows"""
        control = state.control
        M, K = control.outer_count, control.grid.steps
        t = np.tile(control.grid.nodes[:K], M)
        x = state.traj.X[:, :K].reshape(M * K, -1)
        y = state.adjoint.Y[:, :K].reshape(M * K, -1)
        return t, x, y

    @staticmethod
    def refresh(state: FlowState, spec: ProblemSpec, config: FlowConfig, noise: BrownianBundle, xi) -> FlowState:
        """Re-simulate X and re-solve (Y, Z) under the current control"""
        traj = ForwardBackwardService.simulate_forward(spec, state.control, noise, xi)
        adjoint = ForwardBackwardService.solve_adjoint(spec, traj, state.control, config.adjoint_mode)
        return FlowState(s=state.s, step=state.step, control=state.control, traj=traj, adjoint=adjoint)

    @classmethod
    def initial_state(
        cls, spec: ProblemSpec, config: FlowConfig, noise: BrownianBundle, init: ParticleControl, xi
    ) -> FlowState:
        traj = ForwardBackwardService.simulate_forward(spec, init, noise, xi)
        adjoint = ForwardBackwardService.solve_adjoint(spec, traj, init, config.adjoint_mode)
        return FlowState(s=0.0, step=0, control=init, traj=traj, adjoint=adjoint)

    @classmethod
    def langevin_step(cls, state: FlowState, spec: ProblemSpec, config: FlowConfig) -> FlowState:
        """
        One Euler-Maruyama step of the mean-field Langevin dynamics for every particle

            θ ← θ - ds·[∇_a δH⁰/δm(X, Y, ν, θ) + (σ²/2)∇U(θ)] + σ√ds·ξ

        (X, Y) are taken from the state's last refresh. ξ comes from the inner substream
        keyed by the step counter and is independent across (j, k, i).

        Args:
            state (FlowState): Current state
            spec (ProblemSpec): Problem coefficients
            config (FlowConfig): Flow settings

        Returns:
            FlowState: State at s + ds with the same (X, Y) snapshot

        Raises:
            NumericalAbort: If a particle becomes non-finite (reports j, k, i)
        """
        theta = state.control.theta
        M, K, N, p = theta.shape
        t, x, y = cls.node_rows(state)
        clouds = theta.reshape(M * K, N, p)
        gradient = cls.batch_flat_hamiltonian_gradient(spec, t, x, y, clouds, clouds)
        drift = gradient + 0.5 * config.sigma**2 * spec.prior_grad(clouds)
        updated = clouds - config.ds * drift
        if config.sigma > 0:
            rng = NoiseService.substream(config.inner_seed, NoiseService.STREAM_INNER, state.step)
            updated = updated + config.sigma * math.sqrt(config.ds) * rng.standard_normal(clouds.shape)
        updated = updated.reshape(M, K, N, p)

        bad = ~np.all(np.isfinite(updated), axis=-1)
        if np.any(bad):
            j, k, i = (int(v) for v in np.argwhere(bad)[0])
            raise NumericalAbort("langevin step", {"j": j, "k": k, "i": i})
        step = state.step + 1
        return FlowState(
            s=step * config.ds,
            step=step,
            control=state.control.with_theta(updated),
            traj=state.traj,
            adjoint=state.adjoint,
        )

    @classmethod
    def iterate_flow(
        cls,
        spec: ProblemSpec,
        config: FlowConfig,
        noise: BrownianBundle,
        state: FlowState,
        xi,
        steps: int,
    ) -> Iterator[FlowState]:
        """
        Yield the state after each of `steps` Langevin steps

        The forward state and adjoint are refreshed before every step whose counter is a
        multiple of refresh_stride. Refreshing is a pure function of the control and the
        outer noise, so resuming from any yielded state continues the same discrete flow.
        """
        for _ in range(steps):
            if state.step % config.refresh_stride == 0:
                state = cls.refresh(state, spec, config, noise, xi)
            try:
                state = cls.langevin_step(state, spec, config)
            except NumericalAbort as e:
                raise e.at(s=state.s)
            yield state

    @classmethod
    def run_flow(
        cls,
        spec: ProblemSpec,
        config: FlowConfig,
        noise: BrownianBundle,
        init: Union[ParticleControl, FlowState],
        xi,
        checkpoint: Checkpoint,
    ) -> Tuple[FlowTrace, FlowState]:
        """
        Run the flow for total_s and record checkpoints

        A checkpoint is recorded for the starting state, every checkpoint_stride steps and
        at the final step. Passing a FlowState instead of a control resumes that state.

        Args:
            spec (ProblemSpec): Problem coefficients
            config (FlowConfig): Flow settings
            noise (BrownianBundle): Outer increments, shared by every refresh and checkpoint
            init (Union[ParticleControl, FlowState]): Initial control or state to resume
            xi: Initial state of the controlled process
            checkpoint (Checkpoint): Builds the trace row of a state; must not alter it

        Returns:
            Tuple[FlowTrace, FlowState]: Checkpoint trace and final state
        """
        if isinstance(init, FlowState):
            state = init
        else:
            state = cls.initial_state(spec, config, noise, init, xi)
        steps = config.n_steps
        logger.info(
            f"🚀 Flow started: {spec.name}, sigma={config.sigma}, ds={config.ds}, "
            f"{steps} steps from s={state.s:g}"
        )

        trace = FlowTrace()
        trace.append(checkpoint(state))
        last_step = state.step + steps
        for state in cls.iterate_flow(spec, config, noise, state, xi, steps):
            if state.step % config.checkpoint_stride == 0 or state.step == last_step:
                row = checkpoint(state)
                trace.append(row)
                logger.debug(
                    f"Checkpoint s={row.s:.4f}: J={row.J_sigma:.6f}±{row.J_stderr:.2e}, "
                    f"moment={row.moment_q:.4f}, foc={row.foc_spread:.3e}"
                )
        logger.info(f"✅ Flow finished at s={state.s:g} with {len(trace)} checkpoints")
        return trace, state
