"""
Objective Service for the relaxed-control solver
Monte Carlo estimates of the objective, the Hamiltonian and both sides of the
directional-derivative identity
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from loguru import logger

from models.exceptions import ConfigError, ShapeMismatchError
from models.numerics import BrownianBundle, EmpiricalCloud, NodeClouds, ParticleControl, TimeGrid
from models.problem import Array, ProblemSpec
from models.pydantic_models import AdjointMode, DerivativeEstimate, ObjectiveEstimate
from services.flow_service import FlowService
from services.forward_backward_service import ForwardBackwardService
from services.measure_service import MeasureService


@dataclass(frozen=True)
class MixedControl:
    """
    Stratified realization of the mixture ν + ε(μ - ν) at every node

    Each node cloud holds round(N/ε) particles: the N particles of μ plus the particles
    of ν repeated cyclically to fill the rest. μ̂ enters with the realized weight
    N/round(N/ε), which equals ε whenever 1/ε is an integer.
    """

    nu: ParticleControl
    mu: ParticleControl
    epsilon: float

    def __post_init__(self):
        if not 0 < self.epsilon < 1:
            raise ConfigError(f"invalid value for epsilon: {self.epsilon} (must be in (0, 1))")
        if self.nu.theta.shape != self.mu.theta.shape:
            raise ShapeMismatchError(f"mixture needs equal shapes, got {self.nu.theta.shape} and {self.mu.theta.shape}")

    @property
    def grid(self) -> TimeGrid:
        return self.nu.grid

    @property
    def outer_count(self) -> int:
        return self.nu.outer_count

    @property
    def action_dim(self) -> int:
        return self.nu.action_dim

    @property
    def mixture_size(self) -> int:
        return int(round(self.nu.particle_count / self.epsilon))

    @property
    def weight(self) -> float:
        """Realized mass of μ̂ in every node cloud"""
        return self.nu.particle_count / self.mixture_size

    def node_cloud(self, k: int) -> Array:
        n = self.nu.particle_count
        filler = self.mixture_size - n
        reps = -(-filler // n)
        base = np.tile(self.nu.theta[:, k], (1, reps, 1))[:, :filler]
        return np.concatenate([base, self.mu.theta[:, k]], axis=1)


class ObjectiveService:
    """Service class for objective and Hamiltonian estimates"""

    # ------------------------------------------------------------------
    # Hamiltonian
    # ------------------------------------------------------------------

    @staticmethod
    def hamiltonian_value(spec: ProblemSpec, t: float, x, y, z, cloud, sigma: float) -> float:
        """
        H^σ = Φ·y + tr(Γᵀz) + F + (σ²/2)Ent at one point

        Args:
            spec (ProblemSpec): Problem coefficients
            t (float): Time
            x, y: State and costate in ℝ^d
            z: Martingale density (d, noise_dim)
            cloud: Measure argument (N, p); N >= 2 when sigma > 0
            sigma (float): Temperature

        Returns:
            float: Hamiltonian; +∞ when the entropy estimate is the sentinel
        """
        points = cloud.points if isinstance(cloud, EmpiricalCloud) else EmpiricalCloud(np.asarray(cloud, dtype=np.float64)).points
        tt = np.array([float(t)])
        xx = np.asarray(x, dtype=np.float64).reshape(1, spec.state_dim)
        yy = np.asarray(y, dtype=np.float64).reshape(spec.state_dim)
        zz = np.asarray(z, dtype=np.float64).reshape(spec.state_dim, spec.noise_dim)
        value = float(spec.drift(tt, xx, points[None])[0] @ yy)
        value += float(np.sum(spec.diffusion * zz))
        value += float(spec.running_cost(tt, xx, points[None])[0])
        if sigma > 0:
            value += 0.5 * sigma**2 * MeasureService.entropy_estimate(points, spec.prior_potential)
        return value

    # ------------------------------------------------------------------
    # Objective
    # ------------------------------------------------------------------

    @staticmethod
    def path_costs(spec: ProblemSpec, control: NodeClouds, noise: BrownianBundle, xi, sigma: float) -> Array:
        """
        Cost of every outer path, Σ_k [F + (σ²/2)Ent]·dt + g(X_K), shape (M,)

        The entropy term is skipped for sigma = 0.
        """
        traj = ForwardBackwardService.simulate_forward(spec, control, noise, xi)
        grid = control.grid
        M, dt, nodes = control.outer_count, grid.dt, grid.nodes
        costs = np.zeros(M)
        for k in range(grid.steps):
            cloud = control.node_cloud(k)
            running = spec.running_cost(np.full(M, nodes[k]), traj.X[:, k], cloud)
            if sigma > 0:
                running = running + 0.5 * sigma**2 * MeasureService.entropy_estimates(cloud, spec.prior_potential)
            costs += running * dt
        return costs + spec.terminal_cost(traj.X[:, -1])

    @staticmethod
    def entropy_costs(spec: ProblemSpec, control: NodeClouds, sigma: float, paths: int) -> Array:
        """(σ²/2) Σ_k Ent(ν(j, k))·dt for the first `paths` outer paths, shape (paths,)"""
        grid = control.grid
        costs = np.zeros(paths)
        for k in range(grid.steps):
            cloud = control.node_cloud(k)[:paths]
            costs += 0.5 * sigma**2 * MeasureService.entropy_estimates(cloud, spec.prior_potential) * grid.dt
        return costs

    @staticmethod
    def _stderr(values: Array) -> float:
        return float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0

    @classmethod
    def evaluate_objective(
        cls,
        spec: ProblemSpec,
        control: NodeClouds,
        noise: BrownianBundle,
        xi,
        sigma: float,
        entropy_paths: Optional[int] = None,
    ) -> ObjectiveEstimate:
        """
        Monte Carlo estimate of J^σ with its standard error over outer paths

        Args:
            spec (ProblemSpec): Problem coefficients
            control (NodeClouds): Relaxed control
            noise (BrownianBundle): Outer increments (pass the same bundle for common random numbers)
            xi: Initial state
            sigma (float): Temperature
            entropy_paths (Optional[int]): Average the entropy term over the first entropy_paths
                outer paths only; the other terms still use every path and the two standard
                errors are combined

        Returns:
            ObjectiveEstimate: +∞ with entropy_infinite set when a cloud is degenerate
        """
        M = control.outer_count
        if sigma > 0 and entropy_paths is not None and entropy_paths < M:
            costs = cls.path_costs(spec, control, noise, xi, 0.0)
            entropy = cls.entropy_costs(spec, control, sigma, entropy_paths)
            if np.all(np.isfinite(entropy)):
                return ObjectiveEstimate(
                    estimate=float(costs.mean() + entropy.mean()),
                    stderr=float(np.hypot(cls._stderr(costs), cls._stderr(entropy))),
                )
        else:
            costs = cls.path_costs(spec, control, noise, xi, sigma)
            if np.all(np.isfinite(costs)):
                return ObjectiveEstimate(estimate=float(costs.mean()), stderr=cls._stderr(costs))
        logger.warning("Objective is infinite: entropy sentinel on a degenerate cloud")
        return ObjectiveEstimate(estimate=float("inf"), stderr=float("inf"), entropy_infinite=True)

    # ------------------------------------------------------------------
    # Directional derivative identity
    # ------------------------------------------------------------------

    @classmethod
    def _summarize(cls, per_path: Array) -> DerivativeEstimate:
        return DerivativeEstimate(estimate=float(per_path.mean()), stderr=cls._stderr(per_path))

    @classmethod
    def directional_derivative_fd(
        cls,
        spec: ProblemSpec,
        nu: ParticleControl,
        mu: ParticleControl,
        noise: BrownianBundle,
        xi,
        epsilon: float,
    ) -> DerivativeEstimate:
        """
        (J⁰(ν + ε(μ - ν)) - J⁰(ν)) / ε with common random numbers

        The base value is computed on the mixture of ν with itself, so both terms go
        through identical arithmetic and the difference vanishes exactly for μ = ν.
        The two node clouds differ by exactly weight·(μ̂ - ν̂), and the quotient divides
        by that realized weight rather than by ε.

        Raises:
            ConfigError: If epsilon is not in (0, 1)
        """
        mixture = MixedControl(nu, mu, epsilon)
        mixed = cls.path_costs(spec, mixture, noise, xi, 0.0)
        base = cls.path_costs(spec, MixedControl(nu, nu, epsilon), noise, xi, 0.0)
        result = cls._summarize((mixed - base) / mixture.weight)
        logger.debug(f"Finite-difference derivative at epsilon={epsilon}: {result.estimate:.6e} ± {result.stderr:.2e}")
        return result

    @classmethod
    def hamiltonian_pairing(
        cls,
        spec: ProblemSpec,
        nu: ParticleControl,
        mu: ParticleControl,
        noise: BrownianBundle,
        xi,
        mode: Optional[AdjointMode] = None,
    ) -> DerivativeEstimate:
        """
        E ∫₀^T ∫ δH⁰/δm(X_t, Y_t, ν_t, a) (μ_t - ν_t)(da) dt

        (X, Y) are simulated under ν; the time integral is the left Riemann sum in (X, ν).
        The drift term at t_k is paired with Y at t_{k+1}, the node the Euler step moves,
        so the sum is the derivative of the discretized objective up to the adjoint's error.

        Args:
            mode (Optional[AdjointMode]): Adjoint method; Riccati for LQ problems, regression otherwise

        Returns:
            DerivativeEstimate: Mean and standard error over outer paths
        """
        if nu.theta.shape[:2] != mu.theta.shape[:2] or nu.grid != mu.grid:
            raise ShapeMismatchError("pairing needs controls on the same paths and grid")
        if mode is None:
            mode = AdjointMode.RICCATI if spec.lq_params is not None else AdjointMode.REGRESSION
        traj = ForwardBackwardService.simulate_forward(spec, nu, noise, xi)
        adjoint = ForwardBackwardService.solve_adjoint(spec, traj, nu, mode)
        grid = nu.grid
        M, dt, nodes = nu.outer_count, grid.dt, grid.nodes
        per_path = np.zeros(M)
        for k in range(grid.steps):
            t = np.full(M, nodes[k])
            x, y, cloud = traj.X[:, k], adjoint.Y[:, k + 1], nu.theta[:, k]
            toward = FlowService.batch_flat_hamiltonian_value(spec, t, x, y, cloud, mu.theta[:, k]).mean(axis=1)
            current = FlowService.batch_flat_hamiltonian_value(spec, t, x, y, cloud, cloud).mean(axis=1)
            per_path += (toward - current) * dt
        return cls._summarize(per_path)

    @staticmethod
    def identity_gap(fd: DerivativeEstimate, pairing: DerivativeEstimate) -> Tuple[float, float]:
        """Absolute gap between the two sides and the allowed band max(5% |pairing|, 3 combined stderr)"""
        gap = abs(fd.estimate - pairing.estimate)
        band = max(0.05 * abs(pairing.estimate), 3.0 * float(np.hypot(fd.stderr, pairing.stderr)))
        return gap, band
