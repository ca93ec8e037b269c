"""
Noise Service for the relaxed-control solver
Uniform time grids and reproducible Brownian increments on counter-based substreams
"""

import math
import os
from typing import Union

import numpy as np
from loguru import logger

from models.exceptions import ConfigError
from models.numerics import BrownianBundle, TimeGrid
from storage.noise_dump import read_brownian_dump, write_brownian_dump


class NoiseService:
    """Service class for time grids and random streams"""

    # Substream identifiers; every random draw in the package goes through one of them
    STREAM_OUTER = 0
    STREAM_INIT = 1
    STREAM_INNER = 2
    STREAM_MIXTURE = 3
    STREAM_REFERENCE = 4
    STREAM_PROBES = 5

    @staticmethod
    def substream(seed: int, stream: int, *counters: int) -> np.random.Generator:
        """
        Generator keyed by (seed, stream, counters)

        The same key always yields the same stream, independent of how many other
        keys are in use, which makes results invariant to batch sizes and ordering.
        """
        sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),) + tuple(int(c) for c in counters))
        return np.random.default_rng(sequence)

    @staticmethod
    def make_time_grid(horizon: float, steps: int) -> TimeGrid:
        """
        Build the uniform grid on [0, horizon]

        Args:
            horizon (float): T > 0
            steps (int): K >= 1

        Returns:
            TimeGrid: Grid with dt = T/K

        Raises:
            ConfigError: For non-finite or non-positive horizon, or K < 1
        """
        if not math.isfinite(horizon) or horizon <= 0:
            raise ConfigError(f"invalid value for T: {horizon} (must be finite and > 0)")
        if int(steps) != steps or steps < 1:
            raise ConfigError(f"invalid value for K: {steps} (must be an integer >= 1)")
        return TimeGrid(horizon=float(horizon), steps=int(steps))

    @classmethod
    def sample_brownian(cls, seed: int, grid: TimeGrid, outer_count: int, noise_dim: int) -> BrownianBundle:
        """
        Draw Brownian increments ΔW[j][k] ~ N(0, dt·I)

        Path j comes from its own substream, so adding outer paths never changes existing ones.

        Args:
            seed (int): Master seed
            grid (TimeGrid): Time grid
            outer_count (int): Number of outer paths M >= 1
            noise_dim (int): Dimension of W

        Returns:
            BrownianBundle: Increments of shape (M, K, noise_dim)
        """
        if outer_count < 1:
            raise ConfigError(f"invalid value for M: {outer_count} (must be >= 1)")
        scale = math.sqrt(grid.dt)
        increments = np.empty((outer_count, grid.steps, noise_dim))
        for j in range(outer_count):
            increments[j] = cls.substream(seed, cls.STREAM_OUTER, j).standard_normal((grid.steps, noise_dim)) * scale
        increments.setflags(write=False)
        logger.debug(f"Sampled Brownian bundle: M={outer_count}, K={grid.steps}, dim={noise_dim}, seed={seed}")
        return BrownianBundle(increments=increments, grid=grid, seed=seed)

    @staticmethod
    def dump_brownian(bundle: BrownianBundle, path: Union[str, os.PathLike]) -> None:
        """Write the increments for replay (little-endian float64, header M, K, d, seed)"""
        write_brownian_dump(path, bundle.increments, bundle.seed)
        logger.info(f"📁 Brownian increments written to {path}")

    @classmethod
    def load_brownian(cls, path: Union[str, os.PathLike], horizon: float) -> BrownianBundle:
        """Read a dump written by dump_brownian; the horizon is not stored and must be supplied"""
        increments, seed = read_brownian_dump(path)
        grid = cls.make_time_grid(horizon, increments.shape[1])
        increments.setflags(write=False)
        return BrownianBundle(increments=increments, grid=grid, seed=seed)
