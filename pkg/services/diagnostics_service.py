"""
Diagnostics Service for the relaxed-control solver
Runnable optimality and convergence checks: Gibbs fixed point, first-order-condition
flatness, contraction of coupled flows, dissipation monotonicity, moment bounds and the
Markovian projection, plus the closed-form laws of the linear-quadratic instance
"""

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from models.exceptions import ConfigError, ShapeMismatchError
from models.numerics import (
    AdjointBundle,
    BrownianBundle,
    FlowState,
    FlowTrace,
    ParticleControl,
    TimeGrid,
    TraceRow,
    TrajectoryBundle,
)
from models.problem import Array, ProblemSpec
from models.pydantic_models import (
    ContractionResult,
    FlowConfig,
    InteractionParams,
    LqParams,
    MomentTraceReport,
    MonotonicityReport,
    ObjectiveEstimate,
)
from services.flow_service import Checkpoint, FlowService
from services.forward_backward_service import ForwardBackwardService
from services.measure_service import MeasureService
from services.noise_service import NoiseService
from services.objective_service import ObjectiveService


@dataclass(frozen=True)
class ConditionalClouds:
    """
    Markov-projected clouds ν̂(·|x): pooled path clouds with kernel weights

    weights has shape (K, E, M): node k, evaluation point e, outer path j.
    fallback marks the (k, e) pairs where every kernel weight underflowed and the
    nearest path was used instead.
    """

    control: ParticleControl
    weights: Array
    fallback: Array

    def cloud(self, k: int, e: int) -> Tuple[Array, Array]:
        """Pooled points (M·N, p) and their weights (M·N,)"""
        theta = self.control.theta[:, k]
        M, N, p = theta.shape
        return theta.reshape(M * N, p), np.repeat(self.weights[k, e] / N, N)

    def resample(self, k: int, e: int, count: int) -> Array:
        """Systematic resampling of ν̂(·|x_e) at node k to `count` particles"""
        points, weights = self.cloud(k, e)
        return systematic_resample(points, weights, count)


def systematic_resample(points: Array, weights: Array, count: int) -> Array:
    """Deterministic systematic resampling with offset 1/(2·count)"""
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    positions = (np.arange(count) + 0.5) / count
    return points[np.searchsorted(cumulative, positions)]


class DiagnosticsService:
    """Service class for optimality and convergence diagnostics"""

    # Configuration
    GIBBS_HALF_WIDTH = 8.0
    GIBBS_NODES = 1024
    MIN_KDE_MASS = 0.5
    DEFAULT_QUANTILES: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    RHO_FLOOR = 1e-12
    FIT_LOWER = 1e-6
    FIT_UPPER_FRACTION = 0.5
    MONOTONICITY_BAND = 2.0
    EARLY_FRACTION = 0.1
    MOMENT_FACTOR = 2.0
    MIN_PROJECTION_PATHS = 32
    KERNEL_UNDERFLOW = -745.0

    # ------------------------------------------------------------------
    # Shared helpers
    # ------------------------------------------------------------------

    @staticmethod
    def restrict_paths(state: FlowState, count: int) -> FlowState:
        """The state seen by the first `count` outer paths only"""
        if count >= state.control.outer_count:
            return state
        control = state.control.with_theta(state.control.theta[:count])
        traj = TrajectoryBundle(
            X=state.traj.X[:count], xi=state.traj.xi, increments=state.traj.increments[:count], grid=state.traj.grid
        )
        adjoint = AdjointBundle(
            Y=state.adjoint.Y[:count], Z=state.adjoint.Z[:count], ridge_fallback=state.adjoint.ridge_fallback
        )
        return FlowState(s=state.s, step=state.step, control=control, traj=traj, adjoint=adjoint)

    @classmethod
    def gibbs_grid(cls) -> Array:
        return np.linspace(-cls.GIBBS_HALF_WIDTH, cls.GIBBS_HALF_WIDTH, cls.GIBBS_NODES)

    # ------------------------------------------------------------------
    # Gibbs fixed point and first-order condition
    # ------------------------------------------------------------------

    @classmethod
    def gibbs_residual(
        cls, spec: ProblemSpec, state: FlowState, sigma: float, eval_grid: Optional[Array] = None
    ) -> Tuple[Array, float]:
        """
        Total-variation distance between each cloud and its Gibbs target

        The target density is ∝ exp(-(2/σ²)·δH⁰/δm(a, cloud))·e^{-U(a)}, normalized by
        trapezoid quadrature on the evaluation grid. The cloud density is its KDE,
        renormalized on the grid. Degenerate clouds, and clouds whose KDE puts less than
        MIN_KDE_MASS on the grid, get residual 1.

        Args:
            spec (ProblemSpec): Problem coefficients (p = 1)
            state (FlowState): State whose (X, Y) match its control
            sigma (float): Temperature > 0
            eval_grid (Optional[Array]): Quadrature nodes; [-8, 8] with 1024 nodes by default

        Returns:
            Tuple[Array, float]: Residuals of shape (M, K) and their mean

        Raises:
            ShapeMismatchError: If p > 1
            ConfigError: If sigma <= 0
        """
        if spec.action_dim != 1:
            raise ShapeMismatchError(f"gibbs residual uses 1D quadrature, got p={spec.action_dim}")
        if not sigma > 0:
            raise ConfigError(f"invalid value for sigma: {sigma} (gibbs residual needs sigma > 0)")
        grid = cls.gibbs_grid() if eval_grid is None else np.asarray(eval_grid, dtype=np.float64)

        theta = state.control.theta
        M, K, N, p = theta.shape
        t, x, y = FlowService.node_rows(state)
        clouds = theta.reshape(M * K, N, p)
        probes = np.broadcast_to(grid[None, :, None], (M * K, grid.size, 1))

        flat = FlowService.batch_flat_hamiltonian_value(spec, t, x, y, clouds, probes)
        log_target = -(2.0 / sigma**2) * flat - spec.prior_potential(probes)
        log_target -= log_target.max(axis=1, keepdims=True)
        target = np.exp(log_target)
        target /= trapezoid(target, grid, axis=1)[:, None]

        residual = np.ones(M * K)
        live = ~MeasureService.is_degenerate(clouds)
        if np.any(live):
            density = np.exp(MeasureService.kde_log_density(clouds[live], probes[live]))
            mass = trapezoid(density, grid, axis=1)
            enough = mass >= cls.MIN_KDE_MASS
            density = density / np.maximum(mass, np.finfo(float).tiny)[:, None]
            tv = 0.5 * trapezoid(np.abs(density - target[live]), grid, axis=1)
            residual[live] = np.where(enough, tv, 1.0)
        per_node = residual.reshape(M, K)
        return per_node, float(per_node.mean())

    @staticmethod
    def _quantile_probes(clouds: Array, quantiles: Sequence[float]) -> Array:
        """Coordinate-wise cloud quantiles, (B, N, p) -> (B, L, p)"""
        return np.moveaxis(np.quantile(clouds, np.asarray(quantiles), axis=1), 0, 1)

    @classmethod
    def foc_flatness(
        cls,
        spec: ProblemSpec,
        state: FlowState,
        sigma: float,
        probe_quantiles: Sequence[float] = DEFAULT_QUANTILES,
        log_density: Optional[Callable[[Array], Array]] = None,
    ) -> float:
        """
        Spread of δH^σ/δm across cloud quantiles, averaged over (j, k)

        Near zero iff the first-order condition (δH^σ/δm constant in a) holds.

        Args:
            spec (ProblemSpec): Problem coefficients
            state (FlowState): State whose (X, Y) match its control
            sigma (float): Temperature > 0
            probe_quantiles (Sequence[float]): Probe levels
            log_density: Analytic log-density, probes (B, L, p) -> (B, L), used instead of the KDE

        Returns:
            float: Mean standard deviation; +∞ if some cloud is degenerate and no density is supplied
        """
        if not sigma > 0:
            raise ConfigError(f"invalid value for sigma: {sigma} (foc flatness needs sigma > 0)")
        theta = state.control.theta
        M, K, N, p = theta.shape
        t, x, y = FlowService.node_rows(state)
        clouds = theta.reshape(M * K, N, p)
        probes = cls._quantile_probes(clouds, probe_quantiles)
        if log_density is None:
            if np.any(MeasureService.is_degenerate(clouds)):
                logger.warning("FOC flatness on degenerate clouds, returning sentinel")
                return MeasureService.ENTROPY_SENTINEL
            values = FlowService.batch_flat_hamiltonian_sigma(spec, t, x, y, clouds, probes, sigma)
        else:
            values = FlowService.batch_flat_hamiltonian_sigma(
                spec, t, x, y, clouds, probes, sigma, np.asarray(log_density(probes), dtype=np.float64)
            )
        return float(values.std(axis=1).mean())

    # ------------------------------------------------------------------
    # Contraction
    # ------------------------------------------------------------------

    @classmethod
    def fit_rate(cls, s_values: Sequence[float], rho: Sequence[float]) -> Tuple[float, int]:
        """
        Least-squares rate of log ρ against s over the window 1e-6 <= ρ <= 0.5·ρ(0)

        Returns:
            Tuple[float, int]: Rate (minus the slope, nan with fewer than 2 points) and points used
        """
        s_arr, rho_arr = np.asarray(s_values, dtype=np.float64), np.asarray(rho, dtype=np.float64)
        if rho_arr.size == 0 or rho_arr[0] <= 0:
            return float("nan"), 0
        window = (rho_arr >= cls.FIT_LOWER) & (rho_arr <= cls.FIT_UPPER_FRACTION * rho_arr[0])
        if np.count_nonzero(window) < 2:
            return float("nan"), int(np.count_nonzero(window))
        slope = np.polyfit(s_arr[window], np.log(rho_arr[window]), 1)[0]
        return float(-slope), int(np.count_nonzero(window))

    @classmethod
    def contraction_estimate(
        cls,
        spec: ProblemSpec,
        config: FlowConfig,
        noise: BrownianBundle,
        init_a: ParticleControl,
        init_b: ParticleControl,
        xi,
        probe_times: Optional[Sequence[float]] = None,
    ) -> ContractionResult:
        """
        ρ_q between two synchronously coupled flows and the fitted exponential rate

        Both flows use the same outer increments and the same inner noise, step by step.

        Args:
            spec (ProblemSpec): Problem coefficients
            config (FlowConfig): Flow settings (total_s is the horizon of the comparison)
            noise (BrownianBundle): Shared outer increments
            init_a, init_b (ParticleControl): Initial controls
            xi: Initial state
            probe_times (Optional[Sequence[float]]): s-values to record; every checkpoint_stride steps by default

        Returns:
            ContractionResult: Series, fitted rate and fit window size
        """
        steps = config.n_steps
        if probe_times is None:
            probe_steps = set(range(0, steps + 1, config.checkpoint_stride)) | {steps}
        else:
            probe_steps = {min(steps, int(round(s / config.ds))) for s in probe_times}

        state_a = FlowService.initial_state(spec, config, noise, init_a, xi)
        state_b = FlowService.initial_state(spec, config, noise, init_b, xi)
        s_values: List[float] = []
        rho: List[float] = []
        if 0 in probe_steps:
            s_values.append(0.0)
            rho.append(MeasureService.rho_q(state_a.control, state_b.control))
        flows = zip(
            FlowService.iterate_flow(spec, config, noise, state_a, xi, steps),
            FlowService.iterate_flow(spec, config, noise, state_b, xi, steps),
        )
        for state_a, state_b in flows:
            if state_a.step in probe_steps:
                s_values.append(state_a.s)
                rho.append(MeasureService.rho_q(state_a.control, state_b.control))

        truncated = any(value < cls.RHO_FLOOR for value in rho[1:])
        if truncated:
            logger.warning(f"Coupled flows reached the numerical floor {cls.RHO_FLOOR:g}, fit truncated")
        rate, points = cls.fit_rate(s_values, rho)
        logger.info(f"Contraction estimate: rate={rate:.4f} from {points} points")
        return ContractionResult(s_values=s_values, rho=rho, fitted_rate=rate, fit_points=points, truncated=truncated)

    # ------------------------------------------------------------------
    # Trace diagnostics
    # ------------------------------------------------------------------

    @classmethod
    def monotonicity_report(cls, trace: FlowTrace) -> MonotonicityReport:
        """
        Count consecutive checkpoints where J^σ rises by more than 2·(stderr_i + stderr_{i+1})

        max_violation is the worst rise beyond that band, max_excess_stderr the worst rise
        in units of the combined stderr.
        """
        J, se = trace.column("J_sigma"), trace.column("J_stderr")
        pairs = max(0, len(trace) - 1)
        if pairs == 0:
            return MonotonicityReport(pairs=0, violations=0, max_violation=0.0, max_excess_stderr=0.0)
        rise = np.diff(J)
        combined = se[:-1] + se[1:]
        excess = rise - cls.MONOTONICITY_BAND * combined
        violations = int(np.count_nonzero(excess > 0))
        with np.errstate(divide="ignore", invalid="ignore"):
            in_stderr = np.where(combined > 0, rise / combined, np.where(rise > 0, np.inf, 0.0))
        return MonotonicityReport(
            pairs=pairs,
            violations=violations,
            max_violation=float(max(0.0, excess.max())),
            max_excess_stderr=float(max(0.0, in_stderr.max())),
        )

    @classmethod
    def moment_trace(cls, trace: FlowTrace) -> MomentTraceReport:
        """
        Flag the moment series if it exceeds 2 × max(initial value, early plateau)

        The early plateau is the largest value over the first 10% of checkpoints.
        """
        series = trace.column("moment_q")
        if series.size == 0:
            return MomentTraceReport(bounded=True, bound=0.0, series=[])
        early = max(1, int(math.ceil(cls.EARLY_FRACTION * series.size)))
        bound = float(max(series[0], series[:early].max()))
        bounded = bool(np.all(series <= cls.MOMENT_FACTOR * bound))
        if not bounded:
            logger.warning(f"Moment series exceeds {cls.MOMENT_FACTOR:g} × {bound:.4g}")
        return MomentTraceReport(bounded=bounded, bound=bound, series=series.tolist())

    # ------------------------------------------------------------------
    # Markovian projection
    # ------------------------------------------------------------------

    @staticmethod
    def silverman_bandwidth(x: Array) -> Array:
        """Silverman's rule for (M, d) samples, per coordinate"""
        n, d = x.shape
        factor = (4.0 / (d + 2.0)) ** (1.0 / (d + 4.0)) * n ** (-1.0 / (d + 4.0))
        return np.maximum(factor * x.std(axis=0, ddof=1), MeasureService.BANDWIDTH_FLOOR)

    @classmethod
    def kernel_weights(cls, centers: Array, points: Array, bandwidth: Optional[float] = None) -> Tuple[Array, Array]:
        """
        Normalized Gaussian kernel weights of the centers (M, d) seen from points (E, d)

        Returns:
            Tuple[Array, Array]: Weights (E, M) and the underflow-fallback mask (E,)
        """
        h = cls.silverman_bandwidth(centers) if bandwidth is None else np.full(centers.shape[1], float(bandwidth))
        log_kernel = -0.5 * np.sum(((points[:, None, :] - centers[None, :, :]) / h) ** 2, axis=-1)
        underflow = np.max(log_kernel, axis=1) < cls.KERNEL_UNDERFLOW
        weights = np.exp(log_kernel - logsumexp(log_kernel, axis=1, keepdims=True))
        if np.any(underflow):
            rows = np.flatnonzero(underflow)
            weights[rows] = 0.0
            weights[rows, np.argmax(log_kernel[rows], axis=1)] = 1.0
        return weights, underflow

    @classmethod
    def markov_projection(
        cls,
        control: ParticleControl,
        traj: TrajectoryBundle,
        bandwidth: Optional[float] = None,
        eval_points: Optional[Array] = None,
    ) -> ConditionalClouds:
        """
        Nadaraya-Watson estimate of ν̂_t(·|x) = E[ν_t | X_t = x]

        Args:
            control (ParticleControl): Adapted control, one cloud per outer path and node
            traj (TrajectoryBundle): Paths simulated under the control
            bandwidth (Optional[float]): Gaussian kernel width; Silverman on X per node when omitted
            eval_points (Optional[Array]): (E, d) shared by all nodes or (K, E, d); the paths' own
                states when omitted

        Returns:
            ConditionalClouds: Kernel weights over outer paths for every (node, point)

        Raises:
            ShapeMismatchError: If there are fewer than 32 outer paths
        """
        M, K = control.outer_count, control.grid.steps
        if M < cls.MIN_PROJECTION_PATHS:
            raise ShapeMismatchError(f"markov projection needs at least {cls.MIN_PROJECTION_PATHS} outer paths, got {M}")
        if eval_points is None:
            points = np.transpose(traj.X[:, :K], (1, 0, 2))
        else:
            points = np.asarray(eval_points, dtype=np.float64)
            if points.ndim == 2:
                points = np.broadcast_to(points[None], (K,) + points.shape)
        E = points.shape[1]

        weights = np.empty((K, E, M))
        fallback = np.zeros((K, E), dtype=bool)
        for k in range(K):
            weights[k], fallback[k] = cls.kernel_weights(traj.X[:, k], points[k], bandwidth)
        if np.any(fallback):
            logger.warning(f"Markov projection fell back to the nearest path at {int(fallback.sum())} points")
        return ConditionalClouds(control=control, weights=weights, fallback=fallback)

    @classmethod
    def evaluate_projected_objective(
        cls,
        spec: ProblemSpec,
        control: ParticleControl,
        traj: TrajectoryBundle,
        noise: BrownianBundle,
        xi,
        sigma: float,
        bandwidth: Optional[float] = None,
    ) -> ObjectiveEstimate:
        """
        J^σ of the Markov-projected control, run in closed loop with the same increments

        At node k each path uses ν̂_{t_k}(·|X̂_k) resampled systematically to N particles,
        where X̂ is the closed-loop state.
        """
        grid = control.grid
        M, K, N = control.outer_count, grid.steps, control.particle_count
        dt, nodes = grid.dt, grid.nodes
        X = np.empty((M, K + 1, spec.state_dim))
        X[:, 0] = ForwardBackwardService.initial_point(spec, xi)
        costs = np.zeros(M)
        for k in range(K):
            weights, fallback = cls.kernel_weights(traj.X[:, k], X[:, k], bandwidth)
            if np.any(fallback):
                logger.warning(f"Projected control fell back to the nearest path at node {k}")
            pooled = control.theta[:, k].reshape(M * N, -1)
            clouds = np.stack([systematic_resample(pooled, np.repeat(weights[j] / N, N), N) for j in range(M)])
            t = np.full(M, nodes[k])
            running = spec.running_cost(t, X[:, k], clouds)
            if sigma > 0:
                running = running + 0.5 * sigma**2 * MeasureService.entropy_estimates(clouds, spec.prior_potential)
            costs += running * dt
            X[:, k + 1] = X[:, k] + spec.drift(t, X[:, k], clouds) * dt + noise.increments[:, k] @ spec.diffusion.T
        costs += spec.terminal_cost(X[:, K])
        if not np.all(np.isfinite(costs)):
            return ObjectiveEstimate(estimate=float("inf"), stderr=float("inf"), entropy_infinite=True)
        return ObjectiveEstimate(estimate=float(costs.mean()), stderr=float(costs.std(ddof=1) / np.sqrt(M)))

    # ------------------------------------------------------------------
    # Linear-quadratic closed forms
    # ------------------------------------------------------------------

    @staticmethod
    def lq_gibbs_law(
        params: LqParams, sigma: float, y: float, interaction: Optional[InteractionParams] = None
    ) -> Tuple[float, float]:
        """
        Mean and variance of the LQ Gibbs law at costate y (per coordinate)

        mean = -c·y / (r + κ + λ + σ²/2), variance = σ² / (2(r + κ) + σ²)
        """
        inter = interaction or InteractionParams()
        mean = -params.c * y / (params.r_run + inter.kappa + inter.lam + 0.5 * sigma**2)
        variance = sigma**2 / (2.0 * (params.r_run + inter.kappa) + sigma**2)
        return float(mean), float(variance)

    @staticmethod
    def lq_predicted_rate(params: LqParams, sigma: float, interaction: Optional[InteractionParams] = None) -> float:
        """Synchronous-coupling rate r + κ + λ + σ²/2 for two controls differing by a constant shift"""
        inter = interaction or InteractionParams()
        return float(params.r_run + inter.kappa + inter.lam + 0.5 * sigma**2)

    @classmethod
    def lq_gibbs_reference(
        cls,
        params: LqParams,
        sigma: float,
        grid: TimeGrid,
        outer_count: int,
        particle_count: int,
        seed: int,
        interaction: Optional[InteractionParams] = None,
        q_metric: float = 2.0,
    ) -> Optional[ParticleControl]:
        """
        Sample the exact optimal control of an LQ instance whose costate ignores the control

        With q_run = 0 and g_term_quad = 0 the costate is Y_t = g_term_lin·e^{b(T-t)} on every
        path, so each node carries the Gibbs law at that costate. Returns None otherwise.
        """
        if not params.costate_is_control_free:
            return None
        K, p = grid.steps, params.dim
        costate = params.g_term_lin * np.exp(params.b * (grid.horizon - grid.nodes[:K]))
        laws = [cls.lq_gibbs_law(params, sigma, float(y), interaction) for y in costate]
        means = np.array([law[0] for law in laws])
        std = math.sqrt(laws[0][1])
        theta = np.empty((outer_count, K, particle_count, p))
        for j in range(outer_count):
            rng = NoiseService.substream(seed, NoiseService.STREAM_REFERENCE, j)
            theta[j] = means[:, None, None] + std * rng.standard_normal((K, particle_count, p))
        return ParticleControl(theta=theta, grid=grid, q_metric=q_metric)

    # ------------------------------------------------------------------
    # Flow checkpoints
    # ------------------------------------------------------------------

    @classmethod
    def checkpoint_row(
        cls,
        spec: ProblemSpec,
        config: FlowConfig,
        noise: BrownianBundle,
        state: FlowState,
        xi,
        reference: Optional[ParticleControl] = None,
    ) -> TraceRow:
        """
        Diagnostics of one flow checkpoint

        J^σ and the moment use every outer path with the run's own increments, except that
        the entropy term of J^σ is averaged over the first diagnostic_paths paths. The FOC
        spread and Gibbs residual use those same paths under a fresh forward/backward solve.
        Columns that do not apply are nan.
        """
        objective = ObjectiveService.evaluate_objective(
            spec, state.control, noise, xi, config.sigma, entropy_paths=config.diagnostic_paths
        )
        _, moment = MeasureService.cloud_moments(state.control, config.q_metric)

        foc = gibbs = float("nan")
        if config.sigma > 0:
            # the regression adjoint needs every path, diagnostics only the first few
            fresh = cls.restrict_paths(FlowService.refresh(state, spec, config, noise, xi), config.diagnostic_paths)
            foc = cls.foc_flatness(spec, fresh, config.sigma)
            if spec.action_dim == 1:
                gibbs = cls.gibbs_residual(spec, fresh, config.sigma)[1]
        rho_ref = float("nan") if reference is None else MeasureService.rho_q(state.control, reference)
        return TraceRow(
            s=state.s,
            J_sigma=objective.estimate,
            J_stderr=objective.stderr,
            moment_q=moment,
            foc_spread=foc,
            gibbs_residual=gibbs,
            rho_to_ref=rho_ref,
        )

    @classmethod
    def checkpointer(
        cls,
        spec: ProblemSpec,
        config: FlowConfig,
        noise: BrownianBundle,
        xi,
        reference: Optional[ParticleControl] = None,
    ) -> Checkpoint:
        """checkpoint_row bound to one run, for FlowService.run_flow"""

        def checkpoint(state: FlowState) -> TraceRow:
            return cls.checkpoint_row(spec, config, noise, state, xi, reference)

        return checkpoint
