"""
Measure Service for the relaxed-control solver
Particle representation of measure-valued controls: initialization, Wasserstein metrics,
KDE entropy estimates, moments and cloud export
"""

import math
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional, Tuple, Union

import numpy as np
from loguru import logger
from numpy.typing import NDArray
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from models.exceptions import ShapeMismatchError
from models.numerics import EmpiricalCloud, ParticleControl, TimeGrid
from services.noise_service import NoiseService
from storage.csv_io import write_rows
from storage.schemas import cloud_columns

Array = NDArray[np.float64]
Sampler = Callable[[np.random.Generator, Tuple[int, ...]], Array]


@lru_cache(maxsize=None)
def _slice_directions(action_dim: int, count: int, seed: int) -> Array:
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    directions = rng.standard_normal((count, action_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    directions.setflags(write=False)
    return directions


class MeasureService:
    """Service class for particle clouds and the metrics the theory is stated in"""

    # Configuration
    SLICE_COUNT = 64
    SLICE_SEED = 7_031_977
    BANDWIDTH_FLOOR = 1e-6
    DEGENERATE_STD = 1e-12
    KDE_CHUNK_ELEMENTS = 4_000_000
    ENTROPY_SENTINEL = math.inf

    # ------------------------------------------------------------------
    # Samplers and initialization
    # ------------------------------------------------------------------

    @staticmethod
    def gaussian_sampler(mean: float = 0.0, std: float = 1.0) -> Sampler:
        """Sampler of i.i.d. N(mean, std²) coordinates; mean=0, std=1 is the prior γ"""

        def sample(rng: np.random.Generator, shape: Tuple[int, ...]) -> Array:
            return mean + std * rng.standard_normal(shape)

        return sample

    @staticmethod
    def point_mass_sampler(value: float) -> Sampler:
        """Sampler of the Dirac mass at `value` in every coordinate"""

        def sample(rng: np.random.Generator, shape: Tuple[int, ...]) -> Array:
            return np.full(shape, float(value))

        return sample

    @classmethod
    def init_control(
        cls,
        sampler: Sampler,
        grid: TimeGrid,
        outer_count: int,
        particle_count: int,
        seed: int,
        action_dim: int = 1,
        q_metric: float = 2.0,
    ) -> ParticleControl:
        """
        Draw i.i.d. particles for every (j, k)

        Path j uses its own substream, so the control never sees the outer noise
        (any initial condition built this way is trivially adapted).

        Args:
            sampler (Sampler): Distribution on ℝ^p
            grid (TimeGrid): Time grid (K nodes carry clouds)
            outer_count (int): M
            particle_count (int): N >= 2
            seed (int): Seed of the initialization substreams
            action_dim (int): p
            q_metric (float): Metric order carried by the control

        Returns:
            ParticleControl: theta of shape (M, K, N, p)
        """
        shape = (grid.steps, particle_count, action_dim)
        theta = np.empty((outer_count,) + shape)
        for j in range(outer_count):
            theta[j] = sampler(NoiseService.substream(seed, NoiseService.STREAM_INIT, j), shape)
        return ParticleControl(theta=theta, grid=grid, q_metric=q_metric)

    # ------------------------------------------------------------------
    # Wasserstein distances
    # ------------------------------------------------------------------

    @classmethod
    def node_wasserstein_pow(cls, first: Array, second: Array, q: float) -> Array:
        """
        W_q(first_b, second_b)^q for batches of equal-size clouds of shape (B, N, p)

        p = 1 is exact (sorted coupling); p > 1 is the sliced approximation over
        SLICE_COUNT fixed directions.
        """
        if first.shape != second.shape:
            raise ShapeMismatchError(f"cloud batches differ: {first.shape} vs {second.shape}")
        if first.shape[-1] == 1:
            a, b = np.sort(first[..., 0], axis=1), np.sort(second[..., 0], axis=1)
            return np.mean(np.abs(a - b) ** q, axis=1)
        directions = _slice_directions(first.shape[-1], cls.SLICE_COUNT, cls.SLICE_SEED)
        a = np.sort(first @ directions.T, axis=1)
        b = np.sort(second @ directions.T, axis=1)
        return np.mean(np.abs(a - b) ** q, axis=(1, 2))

    @staticmethod
    def _check_compatible(mu: ParticleControl, nu: ParticleControl) -> None:
        if mu.theta.shape[1:] != nu.theta.shape[1:]:
            raise ShapeMismatchError(f"controls differ in (K, N, p): {mu.theta.shape[1:]} vs {nu.theta.shape[1:]}")
        if mu.grid != nu.grid:
            raise ShapeMismatchError(f"controls live on different grids: {mu.grid} vs {nu.grid}")
        if mu.q_metric != nu.q_metric:
            raise ShapeMismatchError(f"controls carry different metric orders: {mu.q_metric} vs {nu.q_metric}")

    @classmethod
    def _path_wasserstein_pow(cls, mu: ParticleControl, nu: ParticleControl) -> Array:
        """(W_q^T)^q per outer path, left Riemann sum over the nodes"""
        cls._check_compatible(mu, nu)
        if mu.outer_count != nu.outer_count:
            raise ShapeMismatchError(f"controls differ in M: {mu.outer_count} vs {nu.outer_count}")
        M, K, N, p = mu.theta.shape
        per_node = cls.node_wasserstein_pow(
            mu.theta.reshape(M * K, N, p), nu.theta.reshape(M * K, N, p), mu.q_metric
        ).reshape(M, K)
        return per_node.sum(axis=1) * mu.grid.dt

    @classmethod
    def wasserstein_qT(cls, mu: ParticleControl, nu: ParticleControl, j: int) -> float:
        """
        (∫₀^T W_q(μ_t, ν_t)^q dt)^{1/q} along outer path j

        Raises:
            ShapeMismatchError: If the controls do not share (K, N, p), grid and order
        """
        cls._check_compatible(mu, nu)
        q = mu.q_metric
        per_node = cls.node_wasserstein_pow(mu.theta[j], nu.theta[j], q)
        return float((per_node.sum() * mu.grid.dt) ** (1.0 / q))

    @classmethod
    def rho_q(cls, mu: ParticleControl, nu: ParticleControl) -> float:
        """(E^W[(W_q^T)^q])^{1/q}: mean over outer paths, then q-th root"""
        q = mu.q_metric
        return float(np.mean(cls._path_wasserstein_pow(mu, nu)) ** (1.0 / q))

    # ------------------------------------------------------------------
    # Kernel density and entropy
    # ------------------------------------------------------------------

    @classmethod
    def kde_bandwidth(cls, clouds: Array) -> Array:
        """Silverman's rule per cloud and coordinate, clouds (B, N, p) -> (B, p), floored"""
        n, p = clouds.shape[1], clouds.shape[2]
        factor = (4.0 / (p + 2.0)) ** (1.0 / (p + 4.0)) * n ** (-1.0 / (p + 4.0))
        std = clouds.std(axis=1, ddof=1)
        return np.maximum(factor * std, cls.BANDWIDTH_FLOOR)

    @classmethod
    def is_degenerate(cls, clouds: Array) -> NDArray[np.bool_]:
        """Clouds with a zero-variance coordinate, (B, N, p) -> (B,)"""
        return np.any(clouds.std(axis=1) <= cls.DEGENERATE_STD, axis=-1)

    @classmethod
    def kde_log_density(
        cls,
        clouds: Array,
        points: Array,
        bandwidth: Optional[Array] = None,
        leave_one_out: bool = False,
    ) -> Array:
        """
        Gaussian product-kernel log-density of each cloud at its own probe points

        Args:
            clouds (Array): (B, N, p)
            points (Array): (B, L, p); must be the clouds themselves when leave_one_out
            bandwidth (Array): (B, p); Silverman's rule when omitted
            leave_one_out (bool): Drop the self-kernel term

        Returns:
            Array: (B, L) log-densities
        """
        B, N, p = clouds.shape
        L = points.shape[1]
        h = cls.kde_bandwidth(clouds) if bandwidth is None else bandwidth
        log_norm = np.sum(np.log(h), axis=-1) + 0.5 * p * math.log(2.0 * math.pi)
        count = N - 1 if leave_one_out else N
        out = np.empty((B, L))
        chunk = max(1, cls.KDE_CHUNK_ELEMENTS // max(1, L * N * p))
        for start in range(0, B, chunk):
            stop = min(B, start + chunk)
            scaled_pts = points[start:stop, :, None, :] / h[start:stop, None, None, :]
            scaled_cld = clouds[start:stop, None, :, :] / h[start:stop, None, None, :]
            exponent = -0.5 * np.sum((scaled_pts - scaled_cld) ** 2, axis=-1)
            if leave_one_out:
                idx = np.arange(L)
                exponent[:, idx, idx] = -np.inf
            out[start:stop] = logsumexp(exponent, axis=-1) - math.log(count) - log_norm[start:stop, None]
        return out

    @classmethod
    def entropy_estimates(cls, clouds: Array, prior_potential: Callable[[Array], Array]) -> Array:
        """
        Leave-one-out KDE estimates of Ent(m) = ∫ [log m + U] dm for a batch (B, N, p) -> (B,)

        Biased by O(bandwidth²) + O(1/N). Degenerate clouds get the +∞ sentinel.
        """
        degenerate = cls.is_degenerate(clouds)
        result = np.full(clouds.shape[0], cls.ENTROPY_SENTINEL)
        live = ~degenerate
        if np.any(live):
            sub = clouds[live]
            log_m = cls.kde_log_density(sub, sub, leave_one_out=True)
            result[live] = np.mean(log_m + prior_potential(sub), axis=1)
        if np.any(degenerate):
            logger.debug(f"Entropy sentinel for {int(degenerate.sum())} degenerate clouds")
        return result

    @classmethod
    def entropy_estimate(cls, cloud: Union[EmpiricalCloud, Array], prior_potential: Callable[[Array], Array]) -> float:
        """
        Relative entropy of a single cloud with respect to γ = e^{-U}

        Args:
            cloud: EmpiricalCloud or (N, p) array with N >= 2
            prior_potential: U

        Returns:
            float: Estimate, or +∞ for a degenerate cloud
        """
        points = cloud.points if isinstance(cloud, EmpiricalCloud) else np.asarray(cloud, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        if points.shape[0] < 2:
            raise ShapeMismatchError("entropy estimate needs at least 2 particles")
        return float(cls.entropy_estimates(points[None], prior_potential)[0])

    @staticmethod
    def entropy_quadrature(density: Array, grid: Array, prior_potential: Callable[[Array], Array]) -> float:
        """Ent of a 1D density tabulated on a grid, ∫ m (log m + U) da by the trapezoid rule"""
        density = np.asarray(density, dtype=np.float64)
        positive = density > 0
        integrand = np.zeros_like(density)
        integrand[positive] = density[positive] * (
            np.log(density[positive]) + prior_potential(grid[positive][:, None])
        )
        return float(trapezoid(integrand, grid))

    @staticmethod
    def entropy_flat_pairing(
        nu_density: Array, mu_density: Array, grid: Array, prior_potential: Callable[[Array], Array]
    ) -> float:
        """∫ [log ν + U] d(μ - ν) for 1D densities on a grid (ν must be positive on the grid)"""
        log_term = np.log(nu_density) + prior_potential(grid[:, None])
        return float(trapezoid(log_term * (mu_density - nu_density), grid))

    # ------------------------------------------------------------------
    # Moments and export
    # ------------------------------------------------------------------

    @staticmethod
    def cloud_moments(control: ParticleControl, q: float) -> Tuple[Array, float]:
        """
        Empirical q-th moments of |θ|

        Returns:
            Tuple[Array, float]: per-(j, k) moments of shape (M, K) and the aggregate (1/MNK)Σ|θ|^q
        """
        norms = np.linalg.norm(control.theta, axis=-1) ** q
        per_node = norms.mean(axis=-1)
        return per_node, float(per_node.mean())

    @staticmethod
    def export_clouds(control: ParticleControl, path: Union[str, Path]) -> int:
        """Write clouds.csv rows (j, k, i, a_1..a_p) in j, k, i order"""
        M, K, N, p = control.theta.shape
        jj, kk, ii = np.meshgrid(np.arange(M), np.arange(K), np.arange(N), indexing="ij")
        flat = control.theta.reshape(-1, p)
        rows = (
            (int(j), int(k), int(i), *values)
            for j, k, i, values in zip(jj.ravel(), kk.ravel(), ii.ravel(), flat)
        )
        count = write_rows(path, cloud_columns(p), rows)
        logger.debug(f"Exported {count} particles to {path}")
        return count
