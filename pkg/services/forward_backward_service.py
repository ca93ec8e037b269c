"""
Forward-Backward Service for the relaxed-control solver
Euler-Maruyama simulation of the controlled state and the adjoint BSDE, by least-squares
regression in general and by the Riccati representation for linear-quadratic problems
"""

import math
from functools import lru_cache
from itertools import combinations_with_replacement
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from loguru import logger

from models.exceptions import NumericalAbort, ProblemDefinitionError, ShapeMismatchError
from models.numerics import AdjointBundle, BrownianBundle, NodeClouds, TimeGrid, TrajectoryBundle
from models.problem import Array, ProblemSpec
from models.pydantic_models import AdjointMode, LqParams
from storage.csv_io import write_rows
from storage.schemas import path_columns


class ForwardBackwardService:
    """Service class for the forward state and the adjoint pair (Y, Z)"""

    # Configuration
    REGRESSION_DEGREE = 3
    PATHS_PER_FEATURE = 10
    RIDGE = 1e-8
    CONSTANT_COLUMN_STD = 1e-12
    RICCATI_SUBSTEPS = 16
    MAX_LEVERAGE = 0.5

    # ------------------------------------------------------------------
    # Forward simulation
    # ------------------------------------------------------------------

    @staticmethod
    def initial_point(spec: ProblemSpec, xi) -> Array:
        point = np.asarray(xi, dtype=np.float64)
        if point.ndim == 0:
            point = np.full(spec.state_dim, float(point))
        if point.shape != (spec.state_dim,):
            raise ShapeMismatchError(f"xi must have dimension {spec.state_dim}, got shape {point.shape}")
        return point

    @classmethod
    def simulate_forward(cls, spec: ProblemSpec, control: NodeClouds, noise: BrownianBundle, xi) -> TrajectoryBundle:
        """
        Euler-Maruyama for dX = Φ_t(X, ν_t) dt + Γ dW along every outer path

        Args:
            spec (ProblemSpec): Problem coefficients
            control (NodeClouds): Clouds ν(j, k) of the relaxed control
            noise (BrownianBundle): Outer increments ΔW[j][k]
            xi: Initial state (scalar broadcast to ℝ^d)

        Returns:
            TrajectoryBundle: X of shape (M, K+1, d) with X[:, 0] = xi

        Raises:
            ShapeMismatchError: If control, noise and problem dimensions disagree
            NumericalAbort: If the state becomes non-finite (reports j, k)
        """
        grid = control.grid
        if noise.grid != grid:
            raise ShapeMismatchError(f"noise grid {noise.grid} differs from control grid {grid}")
        if noise.outer_count != control.outer_count:
            raise ShapeMismatchError(f"noise has {noise.outer_count} outer paths, control has {control.outer_count}")
        if noise.noise_dim != spec.noise_dim:
            raise ShapeMismatchError(f"noise dimension {noise.noise_dim} differs from problem's {spec.noise_dim}")
        if control.action_dim != spec.action_dim:
            raise ShapeMismatchError(f"control dimension {control.action_dim} differs from problem's {spec.action_dim}")

        M, K, dt = control.outer_count, grid.steps, grid.dt
        start = cls.initial_point(spec, xi)
        nodes = grid.nodes
        X = np.empty((M, K + 1, spec.state_dim))
        X[:, 0] = start
        diffusion_t = spec.diffusion.T
        for k in range(K):
            t = np.full(M, nodes[k])
            drift = spec.drift(t, X[:, k], control.node_cloud(k))
            X[:, k + 1] = X[:, k] + drift * dt + noise.increments[:, k] @ diffusion_t
            bad = ~np.all(np.isfinite(X[:, k + 1]), axis=-1)
            if np.any(bad):
                raise NumericalAbort("forward simulation", {"j": int(np.argmax(bad)), "k": k})
        return TrajectoryBundle(X=X, xi=start, increments=noise.increments, grid=grid)

    # ------------------------------------------------------------------
    # Regression adjoint
    # ------------------------------------------------------------------

    @classmethod
    def basis_degree(cls, outer_count: int, state_dim: int) -> int:
        """Largest total degree <= REGRESSION_DEGREE with at least PATHS_PER_FEATURE paths per feature"""
        for degree in range(cls.REGRESSION_DEGREE, -1, -1):
            if outer_count >= cls.PATHS_PER_FEATURE * math.comb(state_dim + degree, degree):
                return degree
        raise ShapeMismatchError(
            f"regression needs at least {cls.PATHS_PER_FEATURE} outer paths, got {outer_count}"
        )

    @classmethod
    def polynomial_features(cls, x: Array, degree: int) -> Array:
        """
        Monomials of total degree <= degree in the standardized state

        Coordinates that are constant across paths (e.g. X at t = 0) are left out,
        so the basis collapses to the intercept there.

        Args:
            x (Array): States (M, d)
            degree (int): Maximal total degree

        Returns:
            Array: Features (M, F), first column the intercept
        """
        std = x.std(axis=0)
        live = std > cls.CONSTANT_COLUMN_STD * (1.0 + np.abs(x.mean(axis=0)))
        z = (x[:, live] - x[:, live].mean(axis=0)) / std[live]
        columns = [np.ones(x.shape[0])]
        for order in range(1, degree + 1):
            for combo in combinations_with_replacement(range(z.shape[1]), order):
                columns.append(np.prod(z[:, combo], axis=1))
        return np.stack(columns, axis=1)

    @classmethod
    def regress(cls, features: Array, targets: Array) -> Tuple[Array, bool]:
        """
        Least-squares fitted values of targets (M, r) on features (M, F)

        Returns:
            Tuple[Array, bool]: Fitted values and whether the ridge fallback was needed
        """
        coef, _, rank, _ = np.linalg.lstsq(features, targets, rcond=None)
        if rank >= features.shape[1]:
            return features @ coef, False
        gram = features.T @ features
        ridge = cls.RIDGE * features.shape[0] * np.eye(features.shape[1])
        coef = np.linalg.solve(gram + ridge, features.T @ targets)
        return features @ coef, True

    @staticmethod
    def leverage(features: Array) -> Array:
        """Diagonal of the hat matrix F(FᵀF)⁺Fᵀ, shape (M,)"""
        return np.einsum("mf,mf->m", features @ np.linalg.pinv(features.T @ features), features)

    @classmethod
    def solve_adjoint_regression(cls, spec: ProblemSpec, traj: TrajectoryBundle, control: NodeClouds) -> AdjointBundle:
        """
        Backward Euler regression scheme for the adjoint BSDE

            Y_K = ∇g(X_K)
            Z_k = E[Y_{k+1} ΔW_kᵀ | X_k] / dt
            Ŷ_k = E[Y_{k+1} - Z_k ΔW_k | X_k],  Y_k = Ŷ_k + (∇_xΦᵀ Ŷ_k + ∇_x F) dt

        Conditional expectations are least-squares projections on polynomials of
        X_k up to degree 3. Subtracting Z_k ΔW_k leaves the conditional mean unchanged and
        removes the Brownian part of Y_{k+1} from the regression residual. The driver does
        not depend on Z because Γ is constant.
        Z at the terminal node repeats Z at the last interior node.

        Args:
            spec (ProblemSpec): Problem coefficients
            traj (TrajectoryBundle): Forward paths and their increments
            control (NodeClouds): Control the paths were simulated under

        Returns:
            AdjointBundle: Y of shape (M, K+1, d), Z of shape (M, K+1, d, noise_dim)

        Raises:
            ShapeMismatchError: If there are too few outer paths for the basis
            NumericalAbort: If the regression produces non-finite values (reports k)
        """
        X = traj.X
        M, steps, d = X.shape[0], X.shape[1] - 1, X.shape[2]
        n = traj.increments.shape[2]
        grid = traj.grid
        dt, nodes = grid.dt, grid.nodes
        degree = cls.basis_degree(M, d)

        Y = np.empty((M, steps + 1, d))
        Z = np.empty((M, steps + 1, d, n))
        Y[:, steps] = spec.grad_x_terminal(X[:, steps])
        fallback = False
        for k in range(steps - 1, -1, -1):
            features = cls.polynomial_features(X[:, k], degree)
            next_y = Y[:, k + 1]
            increments = traj.increments[:, k]
            products = (next_y[:, :, None] * increments[:, None, :]).reshape(M, d * n)
            fitted_products, used_ridge = cls.regress(features, products)
            Z[:, k] = fitted_products.reshape(M, d, n) / dt
            # leave-one-out fit, so path j's own increment does not enter its control variate
            leverage = np.minimum(cls.leverage(features), cls.MAX_LEVERAGE)[:, None]
            loo = (fitted_products - leverage * products) / (1.0 - leverage)
            martingale = np.einsum("min,mn->mi", loo.reshape(M, d, n) / dt, increments)
            y_hat, used_ridge_y = cls.regress(features, next_y - martingale)
            fallback = fallback or used_ridge or used_ridge_y
            t = np.full(M, nodes[k])
            cloud = control.node_cloud(k)
            driver = np.einsum("mil,mi->ml", spec.grad_x_drift(t, X[:, k], cloud), y_hat) + spec.grad_x_cost(
                t, X[:, k], cloud
            )
            Y[:, k] = y_hat + driver * dt
            if not (np.all(np.isfinite(Y[:, k])) and np.all(np.isfinite(Z[:, k]))):
                raise NumericalAbort("adjoint regression", {"k": k})
        Z[:, steps] = Z[:, steps - 1]
        if fallback:
            logger.warning("Rank-deficient adjoint regression, ridge fallback used")
        return AdjointBundle(Y=Y, Z=Z, ridge_fallback=fallback)

    # ------------------------------------------------------------------
    # Riccati adjoint (linear-quadratic problems)
    # ------------------------------------------------------------------

    @staticmethod
    def _riccati_rhs(params: LqParams, P: float, p: Array, control_mean: Array) -> Tuple[float, Array]:
        return -2.0 * params.b * P - params.q_run, -params.b * p - P * params.c * control_mean

    @classmethod
    def _rk4_back(cls, params: LqParams, P: float, p: Array, control_mean: Array, h: float) -> Tuple[float, Array]:
        """One RK4 step from t to t - h with the control mean frozen"""
        k1P, k1p = cls._riccati_rhs(params, P, p, control_mean)
        k2P, k2p = cls._riccati_rhs(params, P - 0.5 * h * k1P, p - 0.5 * h * k1p, control_mean)
        k3P, k3p = cls._riccati_rhs(params, P - 0.5 * h * k2P, p - 0.5 * h * k2p, control_mean)
        k4P, k4p = cls._riccati_rhs(params, P - h * k3P, p - h * k3p, control_mean)
        P_new = P - h / 6.0 * (k1P + 2.0 * k2P + 2.0 * k3P + k4P)
        p_new = p - h / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        return P_new, p_new

    @classmethod
    def riccati_propagators(cls, params: LqParams, grid: TimeGrid, substeps: int) -> Tuple[Array, Array, Array]:
        """
        Control-independent part of the backward RK4 sweep, cached per (params, grid, substeps)

        The RK4 map of one grid interval is affine in (p_{k+1}, m̄_k) with scalar
        coefficients: p_k = A_k p_{k+1} + B_k m̄_k.

        Returns:
            Tuple[Array, Array, Array]: P of shape (K+1,), A and B of shape (K,), read-only
        """
        return _riccati_propagators(params, grid, substeps)

    @classmethod
    def riccati_coefficients(
        cls, params: LqParams, grid: TimeGrid, control_means: Array, substeps: Optional[int] = None
    ) -> Tuple[Array, Array]:
        """
        Solve P' = -2bP - q_run, P_T = g_term_quad and p' = -b p - P c m̄, p_T = g_term_lin backward

        m̄ is the cloud mean on [t_k, t_{k+1}). Each grid interval is split into
        `substeps` RK4 steps.

        Args:
            params (LqParams): LQ coefficients
            grid (TimeGrid): Time grid
            control_means (Array): Cloud means (M, K, d)
            substeps (int): RK4 steps per grid interval (RICCATI_SUBSTEPS by default)

        Returns:
            Tuple[Array, Array]: P of shape (K+1,) and p of shape (M, K+1, d)
        """
        substeps = cls.RICCATI_SUBSTEPS if substeps is None else substeps
        P, A, B = cls.riccati_propagators(params, grid, substeps)
        M, K, d = control_means.shape
        p = np.empty((M, K + 1, d))
        p[:, K] = params.g_term_lin
        for k in range(K - 1, -1, -1):
            p[:, k] = A[k] * p[:, k + 1] + B[k] * control_means[:, k]
        return P.copy(), p

    @classmethod
    def solve_adjoint_riccati(cls, params: LqParams, traj: TrajectoryBundle, control: NodeClouds) -> AdjointBundle:
        """
        Affine adjoint of the LQ problem: Y = P_t X + p_t, Z = P_t Γ

        Args:
            params (LqParams): LQ coefficients
            traj (TrajectoryBundle): Forward paths
            control (NodeClouds): Control the paths were simulated under

        Returns:
            AdjointBundle: Exact adjoint up to the RK4 error
        """
        X = traj.X
        M, steps, d = X.shape[0], X.shape[1] - 1, X.shape[2]
        if d != params.dim:
            raise ShapeMismatchError(f"trajectory dimension {d} differs from the LQ dimension {params.dim}")
        if control.outer_count != M:
            raise ShapeMismatchError(f"control has {control.outer_count} outer paths, trajectory has {M}")
        means = np.stack([control.node_cloud(k).mean(axis=1) for k in range(steps)], axis=1)
        P, p = cls.riccati_coefficients(params, traj.grid, means)
        Y = P[None, :, None] * X + p
        Y[:, steps] = params.g_term_quad * X[:, steps] + params.g_term_lin
        gamma = params.gamma_const * np.eye(d)
        Z = np.broadcast_to(P[None, :, None, None] * gamma, (M, steps + 1, d, d)).copy()
        if not np.all(np.isfinite(Y)):
            raise NumericalAbort("adjoint riccati", {"k": int(np.argmax(~np.all(np.isfinite(Y), axis=(0, 2))))})
        return AdjointBundle(Y=Y, Z=Z)

    @classmethod
    def solve_adjoint(
        cls, spec: ProblemSpec, traj: TrajectoryBundle, control: NodeClouds, mode: AdjointMode
    ) -> AdjointBundle:
        """
        Solve the adjoint with the configured method

        Raises:
            ProblemDefinitionError: If the Riccati method is requested for a non-LQ problem
        """
        if AdjointMode(mode) == AdjointMode.RICCATI:
            if spec.lq_params is None:
                raise ProblemDefinitionError(f"riccati adjoint needs an LQ problem, got '{spec.name}'")
            return cls.solve_adjoint_riccati(spec.lq_params, traj, control)
        return cls.solve_adjoint_regression(spec, traj, control)

    @staticmethod
    def adjoint_discrepancy(reference: AdjointBundle, estimate: AdjointBundle) -> float:
        """max over k of mean_j |Y_est - Y_ref| / mean_j |Y_ref|"""
        error = np.abs(estimate.Y - reference.Y).sum(axis=-1).mean(axis=0)
        scale = np.abs(reference.Y).sum(axis=-1).mean(axis=0)
        return float(np.max(error / np.maximum(scale, np.finfo(float).tiny)))

    @staticmethod
    def export_paths(traj: TrajectoryBundle, adjoint: AdjointBundle, path: Union[str, Path]) -> int:
        """Write (j, k, x_1..x_d, y_1..y_d) rows in j, k order"""
        M, nodes, d = traj.X.shape
        rows = (
            (j, k, *traj.X[j, k], *adjoint.Y[j, k])
            for j in range(M)
            for k in range(nodes)
        )
        count = write_rows(path, path_columns(d), rows)
        logger.debug(f"Exported {count} path rows to {path}")
        return count


@lru_cache(maxsize=64)
def _riccati_propagators(params: LqParams, grid: TimeGrid, substeps: int) -> Tuple[Array, Array, Array]:
    K = grid.steps
    h = grid.dt / substeps
    P = np.empty(K + 1)
    A = np.empty(K)
    B = np.empty(K)
    P[K] = params.g_term_quad
    unit = np.array([1.0, 0.0])
    mean = np.array([0.0, 1.0])
    for k in range(K - 1, -1, -1):
        # column 0 propagates p_{k+1} = 1 with m̄ = 0, column 1 propagates p_{k+1} = 0 with m̄ = 1
        P_k, p_k = P[k + 1], unit.copy()
        for _ in range(substeps):
            P_k, p_k = ForwardBackwardService._rk4_back(params, P_k, p_k, mean, h)
        P[k], A[k], B[k] = P_k, p_k[0], p_k[1]
    for array in (P, A, B):
        array.setflags(write=False)
    return P, A, B
