"""
Control-problem interface: coefficients of the controlled SDE, costs, prior and their derivatives
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from models.exceptions import ProblemDefinitionError
from models.pydantic_models import InteractionParams, LqParams

Array = NDArray[np.float64]

# Batched callables. Shapes: t (B,), x (B, d), m (B, N, p) clouds, a (B, L, p) probe actions.
MeasureField = Callable[[Array, Array, Array], Array]
FlatField = Callable[[Array, Array, Array, Array], Array]
StateField = Callable[[Array], Array]


@dataclass(frozen=True)
class ProblemSpec:
    """
    Immutable bundle of the problem coefficients

    Callable shapes (B = batch of outer paths or (path, node) pairs):
        drift(t, x, m)               -> (B, d)        Φ_t(x, m)
        running_cost(t, x, m)        -> (B,)          F_t(x, m)
        terminal_cost(x)             -> (B,)          g(x)
        prior_potential(a)           -> a.shape[:-1]  U(a), normalized so e^{-U} is a density
        prior_grad(a)                -> a.shape       ∇U(a)
        grad_x_drift(t, x, m)        -> (B, d, d)     ∂Φ_i/∂x_l
        grad_x_cost(t, x, m)         -> (B, d)        ∇_x F
        grad_x_terminal(x)           -> (B, d)        ∇_x g
        flat_drift(t, x, m, a)       -> (B, L, d)     δΦ/δm, centered under m
        flat_cost(t, x, m, a)        -> (B, L)        δF/δm, centered under m
        flat_drift_agrad(t, x, m, a) -> (B, L, d, p)  ∇_a δΦ/δm
        flat_cost_agrad(t, x, m, a)  -> (B, L, p)     ∇_a δF/δm

    The diffusion is a constant (d, noise_dim) matrix.
    """

    state_dim: int
    action_dim: int
    noise_dim: int
    diffusion: Array
    drift: MeasureField
    running_cost: MeasureField
    terminal_cost: StateField
    prior_potential: StateField
    prior_grad: StateField
    grad_x_drift: MeasureField
    grad_x_cost: MeasureField
    grad_x_terminal: StateField
    flat_drift: FlatField
    flat_cost: FlatField
    flat_drift_agrad: FlatField
    flat_cost_agrad: FlatField
    name: str = "custom"
    lq_params: Optional[LqParams] = None
    interaction: Optional[InteractionParams] = None

    def __post_init__(self):
        diffusion = np.array(self.diffusion, dtype=np.float64)
        if diffusion.shape != (self.state_dim, self.noise_dim):
            raise ProblemDefinitionError(
                f"diffusion must be a constant ({self.state_dim}, {self.noise_dim}) matrix, "
                f"got shape {diffusion.shape}"
            )
        if not np.all(np.isfinite(diffusion)):
            raise ProblemDefinitionError("diffusion has non-finite entries")
        diffusion.setflags(write=False)
        object.__setattr__(self, "diffusion", diffusion)
