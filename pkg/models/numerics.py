"""
Array containers for grids, noise, particle controls and flow state
All containers are immutable snapshots over numpy arrays (shapes documented per field)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Protocol

import numpy as np
from numpy.typing import NDArray

from models.exceptions import ShapeMismatchError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k·dt on [0, horizon], k = 0..steps"""

    horizon: float
    steps: int

    @property
    def dt(self) -> float:
        return self.horizon / self.steps

    @property
    def nodes(self) -> NDArray[np.float64]:
        nodes = np.arange(self.steps + 1, dtype=np.float64) * self.dt
        nodes[-1] = self.horizon
        return nodes


@dataclass(frozen=True)
class BrownianBundle:
    """Outer Brownian increments, shape (M, K, noise_dim), each N(0, dt·I)"""

    increments: NDArray[np.float64]
    grid: TimeGrid
    seed: int

    @property
    def outer_count(self) -> int:
        return self.increments.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.increments.shape[2]


@dataclass(frozen=True)
class EmpiricalCloud:
    """Uniformly weighted point cloud, points of shape (N, p)"""

    points: NDArray[np.float64]

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        if points.ndim == 1:
            points = points[:, None]
        if points.ndim != 2 or points.shape[0] < 1:
            raise ShapeMismatchError(f"cloud must be (N, p) with N >= 1, got {points.shape}")
        if not np.all(np.isfinite(points)):
            raise ShapeMismatchError("cloud has non-finite entries")
        object.__setattr__(self, "points", points)

    @property
    def size(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


class NodeClouds(Protocol):
    """Anything that hands out the per-path clouds of a time node"""

    grid: TimeGrid

    @property
    def outer_count(self) -> int: ...

    @property
    def action_dim(self) -> int: ...

    def node_cloud(self, k: int) -> NDArray[np.float64]: ...


@dataclass(frozen=True)
class ParticleControl:
    """
    Measure-valued control as particle clouds

    theta has shape (M, K, N, p): outer path j, time node k = 0..K-1,
    inner particle i, action coordinate.
    """

    theta: NDArray[np.float64]
    grid: TimeGrid
    q_metric: float = 2.0

    def __post_init__(self):
        if self.theta.ndim != 4:
            raise ShapeMismatchError(f"theta must be (M, K, N, p), got {self.theta.shape}")
        if self.theta.shape[1] != self.grid.steps:
            raise ShapeMismatchError(
                f"theta has {self.theta.shape[1]} time nodes, grid has {self.grid.steps} steps"
            )
        if self.theta.shape[2] < 2:
            raise ShapeMismatchError("need at least 2 inner particles per cloud")

    @property
    def outer_count(self) -> int:
        return self.theta.shape[0]

    @property
    def particle_count(self) -> int:
        return self.theta.shape[2]

    @property
    def action_dim(self) -> int:
        return self.theta.shape[3]

    def node_cloud(self, k: int) -> NDArray[np.float64]:
        """Clouds of all outer paths at node k, shape (M, N, p)"""
        return self.theta[:, k]

    def cloud(self, j: int, k: int) -> EmpiricalCloud:
        return EmpiricalCloud(self.theta[j, k])

    def with_theta(self, theta: NDArray[np.float64]) -> "ParticleControl":
        return ParticleControl(theta=theta, grid=self.grid, q_metric=self.q_metric)


@dataclass(frozen=True)
class TrajectoryBundle:
    """Forward paths X of shape (M, K+1, d) started at xi, with the increments that drove them"""

    X: NDArray[np.float64]
    xi: NDArray[np.float64]
    increments: NDArray[np.float64]
    grid: TimeGrid


@dataclass(frozen=True)
class AdjointBundle:
    """Adjoint paths: Y of shape (M, K+1, d), Z of shape (M, K+1, d, noise_dim)"""

    Y: NDArray[np.float64]
    Z: NDArray[np.float64]
    ridge_fallback: bool = False


@dataclass(frozen=True)
class FlowState:
    """
    Mean-field Langevin state at algorithmic time s

    `step` is the Langevin step counter; the inner noise of step n is drawn
    from a substream keyed by n, so the counter is the whole inner RNG state.
    """

    s: float
    step: int
    control: ParticleControl
    traj: TrajectoryBundle
    adjoint: AdjointBundle


@dataclass(frozen=True)
class TraceRow:
    s: float
    J_sigma: float
    J_stderr: float
    moment_q: float
    foc_spread: float
    gibbs_residual: float
    rho_to_ref: float


@dataclass
class FlowTrace:
    """Checkpoint diagnostics recorded along a flow"""

    rows: List[TraceRow] = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        self.rows.append(row)

    def column(self, name: str) -> NDArray[np.float64]:
        return np.array([getattr(row, name) for row in self.rows], dtype=np.float64)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def last(self) -> Optional[TraceRow]:
        return self.rows[-1] if self.rows else None
