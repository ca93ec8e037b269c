"""
Problem Service for the relaxed-control solver
Builds the linear-quadratic and single-layer network policy problems with analytic derivatives,
and checks flat derivatives against the measure-increment identity
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Union

import numpy as np
from loguru import logger

from models.exceptions import ProblemDefinitionError, ShapeMismatchError
from models.numerics import EmpiricalCloud
from models.problem import Array, FlatField, ProblemSpec
from models.pydantic_models import InteractionParams, LqParams


@dataclass(frozen=True)
class Activation:
    """
    Single-neuron activation φ(x; θ) with its derivatives

    value(x, θ)      -> (B, L, A)
    theta_grad(x, θ) -> (B, L, A, p)
    x_grad(x, θ)     -> (B, L, A, d)
    """

    name: str
    value: Callable[[Array, Array], Array]
    theta_grad: Callable[[Array, Array], Array]
    x_grad: Callable[[Array, Array], Array]
    differentiable: bool = True
    # False: φ ignores the state and p equals the output dimension
    uses_state: bool = True


@dataclass(frozen=True)
class NnPolicyCoefficients:
    """
    Classical coefficients b(x, α), f(x, α), g(x) of the network-policy problem

    base_drift(x, α) -> (B, d), base_drift_dx -> (B, d, d), base_drift_dalpha -> (B, d, A)
    base_cost(x, α)  -> (B,),   base_cost_dx  -> (B, d),    base_cost_dalpha  -> (B, A)
    terminal(x)      -> (B,),   terminal_grad -> (B, d)
    """

    state_dim: int
    control_dim: int
    diffusion: Array
    base_drift: Callable[[Array, Array], Array]
    base_drift_dx: Callable[[Array, Array], Array]
    base_drift_dalpha: Callable[[Array, Array], Array]
    base_cost: Callable[[Array, Array], Array]
    base_cost_dx: Callable[[Array, Array], Array]
    base_cost_dalpha: Callable[[Array, Array], Array]
    terminal: Callable[[Array], Array]
    terminal_grad: Callable[[Array], Array]


def _augment(x: Array) -> Array:
    """x̃ = (x, 1) with a probe axis inserted"""
    ones = np.ones(x.shape[:-1] + (1,))
    return np.concatenate([x, ones], axis=-1)[:, None, :]


def _ridge_activation(name: str, fn: Callable[[Array], Array], dfn: Callable[[Array], Array]) -> Activation:
    """φ(x; θ) = fn(θ·x̃) with x̃ = (x, 1), so p = d + 1 and A = 1"""

    def value(x, theta):
        z = np.sum(theta * _augment(x), axis=-1)
        return fn(z)[..., None]

    def theta_grad(x, theta):
        x_tilde = _augment(x)
        z = np.sum(theta * x_tilde, axis=-1)
        return (dfn(z)[..., None] * x_tilde)[:, :, None, :]

    def x_grad(x, theta):
        z = np.sum(theta * _augment(x), axis=-1)
        return (dfn(z)[..., None] * theta[..., :-1])[:, :, None, :]

    return Activation(name=name, value=value, theta_grad=theta_grad, x_grad=x_grad)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _identity_activation() -> Activation:
    def value(x, theta):
        return theta

    def theta_grad(x, theta):
        p = theta.shape[-1]
        return np.broadcast_to(np.eye(p), theta.shape[:2] + (p, p)).copy()

    def x_grad(x, theta):
        return np.zeros(theta.shape + (x.shape[-1],))

    return Activation(name="identity", value=value, theta_grad=theta_grad, x_grad=x_grad, uses_state=False)


def _relu_activation() -> Activation:
    activation = _ridge_activation(
        "relu", lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)
    )
    return dataclasses.replace(activation, differentiable=False)


class ProblemService:
    """Service class for building and checking control problems"""

    # Configuration
    FD_STEP = 1e-6
    ACTIVATIONS: Dict[str, Callable[[], Activation]] = {
        "identity": _identity_activation,
        "linear": _identity_activation,
        "tanh": lambda: _ridge_activation("tanh", np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
        "sigmoid": lambda: _ridge_activation(
            "sigmoid", _sigmoid, lambda z: _sigmoid(z) * (1.0 - _sigmoid(z))
        ),
        "relu": _relu_activation,
    }

    # ------------------------------------------------------------------
    # Shared pieces
    # ------------------------------------------------------------------

    @staticmethod
    def gaussian_prior_potential(a: Array) -> Array:
        """U(a) = |a|²/2 + (p/2) log 2π, so γ = e^{-U} is the standard Gaussian density"""
        p = a.shape[-1]
        return 0.5 * np.sum(a * a, axis=-1) + 0.5 * p * math.log(2.0 * math.pi)

    @staticmethod
    def gaussian_prior_grad(a: Array) -> Array:
        return np.array(a, dtype=np.float64, copy=True)

    @staticmethod
    def centered(raw: FlatField) -> FlatField:
        """Wrap a raw flat derivative so that it integrates to zero against the measure argument"""

        def flat(t, x, m, a):
            values = raw(t, x, m, a)
            baseline = raw(t, x, m, m).mean(axis=1, keepdims=True)
            return values - baseline

        return flat

    @classmethod
    def resolve_activation(cls, activation: Union[str, Activation]) -> Activation:
        if isinstance(activation, Activation):
            resolved = activation
        else:
            factory = cls.ACTIVATIONS.get(activation)
            if factory is None:
                raise ProblemDefinitionError(
                    f"unknown activation '{activation}'. Must be one of: {sorted(cls.ACTIVATIONS)}"
                )
            resolved = factory()
        if not resolved.differentiable:
            raise ProblemDefinitionError(
                f"activation '{resolved.name}' is not differentiable in its parameters"
            )
        return resolved

    # ------------------------------------------------------------------
    # Builders
    # ------------------------------------------------------------------

    @classmethod
    def build_lq_problem(cls, params: LqParams) -> ProblemSpec:
        """
        Build the linear-quadratic problem with exact analytic derivatives

        Args:
            params (LqParams): Coefficients of the instance

        Returns:
            ProblemSpec: The assembled problem

        Raises:
            ProblemDefinitionError: If r_run <= 0 or gamma_const <= 0
        """
        if not params.r_run > 0:
            raise ProblemDefinitionError(f"r_run must be positive, got {params.r_run}")
        if not params.gamma_const > 0:
            raise ProblemDefinitionError(f"gamma_const must be positive, got {params.gamma_const}")

        b, c, q, r = params.b, params.c, params.q_run, params.r_run
        gq, gl, dim = params.g_term_quad, params.g_term_lin, params.dim
        eye = np.eye(dim)

        def drift(t, x, m):
            return b * x + c * m.mean(axis=1)

        def running_cost(t, x, m):
            return 0.5 * q * np.sum(x * x, axis=-1) + 0.5 * r * np.mean(np.sum(m * m, axis=-1), axis=1)

        def terminal_cost(x):
            return 0.5 * gq * np.sum(x * x, axis=-1) + gl * np.sum(x, axis=-1)

        def grad_x_drift(t, x, m):
            return np.broadcast_to(b * eye, (x.shape[0], dim, dim)).copy()

        def grad_x_cost(t, x, m):
            return q * x

        def grad_x_terminal(x):
            return gq * x + gl

        def flat_drift(t, x, m, a):
            return c * (a - m.mean(axis=1, keepdims=True))

        def flat_drift_agrad(t, x, m, a):
            return np.broadcast_to(c * eye, a.shape[:2] + (dim, dim)).copy()

        def raw_flat_cost(t, x, m, a):
            return 0.5 * r * np.sum(a * a, axis=-1)

        def flat_cost_agrad(t, x, m, a):
            return r * a

        spec = ProblemSpec(
            state_dim=dim,
            action_dim=dim,
            noise_dim=dim,
            diffusion=params.gamma_const * eye,
            drift=drift,
            running_cost=running_cost,
            terminal_cost=terminal_cost,
            prior_potential=cls.gaussian_prior_potential,
            prior_grad=cls.gaussian_prior_grad,
            grad_x_drift=grad_x_drift,
            grad_x_cost=grad_x_cost,
            grad_x_terminal=grad_x_terminal,
            flat_drift=flat_drift,
            flat_cost=cls.centered(raw_flat_cost),
            flat_drift_agrad=flat_drift_agrad,
            flat_cost_agrad=flat_cost_agrad,
            name="lq",
            lq_params=params,
        )
        logger.debug(f"Built LQ problem: {params.model_dump()}")
        return spec

    @classmethod
    def build_nn_policy_problem(
        cls,
        coefficients: NnPolicyCoefficients,
        activation: Union[str, Activation] = "tanh",
        action_dim: Optional[int] = None,
    ) -> ProblemSpec:
        """
        Build the policy-gradient problem with an infinitely wide single-layer network

        The Markov control α(x) = ∫ φ(x; θ) m(dθ) enters the classical coefficients,
        Φ(x, m) = b(x, α(x)) and F(x, m) = f(x, α(x)); flat derivatives follow by the chain rule.

        Args:
            coefficients (NnPolicyCoefficients): b, f, g and their partial derivatives
            activation (Union[str, Activation]): Registered name or custom activation
            action_dim (Optional[int]): Parameter dimension p; required for the identity activation

        Returns:
            ProblemSpec: The assembled problem

        Raises:
            ProblemDefinitionError: For non-differentiable activations or inconsistent dimensions
        """
        act = cls.resolve_activation(activation)
        d, A = coefficients.state_dim, coefficients.control_dim
        if act.uses_state:
            p = d + 1 if action_dim is None else action_dim
            if p != d + 1:
                raise ProblemDefinitionError(f"activation '{act.name}' needs p = d + 1 = {d + 1}, got {p}")
            if A != 1:
                raise ProblemDefinitionError(f"activation '{act.name}' has scalar output, control_dim is {A}")
        else:
            p = A if action_dim is None else action_dim
            if p != A:
                raise ProblemDefinitionError(f"identity activation needs p = control_dim = {A}, got {p}")

        def control_mean(x, m):
            return act.value(x, m).mean(axis=1)

        def drift(t, x, m):
            return coefficients.base_drift(x, control_mean(x, m))

        def running_cost(t, x, m):
            return coefficients.base_cost(x, control_mean(x, m))

        def grad_x_drift(t, x, m):
            alpha = control_mean(x, m)
            dalpha_dx = act.x_grad(x, m).mean(axis=1)
            return coefficients.base_drift_dx(x, alpha) + np.einsum(
                "bdA,bAe->bde", coefficients.base_drift_dalpha(x, alpha), dalpha_dx
            )

        def grad_x_cost(t, x, m):
            alpha = control_mean(x, m)
            dalpha_dx = act.x_grad(x, m).mean(axis=1)
            return coefficients.base_cost_dx(x, alpha) + np.einsum(
                "bA,bAe->be", coefficients.base_cost_dalpha(x, alpha), dalpha_dx
            )

        def flat_drift(t, x, m, a):
            alpha = control_mean(x, m)
            return np.einsum(
                "bdA,blA->bld", coefficients.base_drift_dalpha(x, alpha), act.value(x, a) - alpha[:, None, :]
            )

        def flat_drift_agrad(t, x, m, a):
            alpha = control_mean(x, m)
            return np.einsum("bdA,blAp->bldp", coefficients.base_drift_dalpha(x, alpha), act.theta_grad(x, a))

        def flat_cost(t, x, m, a):
            alpha = control_mean(x, m)
            return np.einsum(
                "bA,blA->bl", coefficients.base_cost_dalpha(x, alpha), act.value(x, a) - alpha[:, None, :]
            )

        def flat_cost_agrad(t, x, m, a):
            alpha = control_mean(x, m)
            return np.einsum("bA,blAp->blp", coefficients.base_cost_dalpha(x, alpha), act.theta_grad(x, a))

        diffusion = np.asarray(coefficients.diffusion, dtype=np.float64)
        if diffusion.ndim != 2 or diffusion.shape[0] != d:
            raise ProblemDefinitionError(f"diffusion must be a constant (d, n) matrix, got {diffusion.shape}")

        logger.debug(f"Built NN policy problem: d={d}, p={p}, activation={act.name}")
        return ProblemSpec(
            state_dim=d,
            action_dim=p,
            noise_dim=diffusion.shape[1],
            diffusion=diffusion,
            drift=drift,
            running_cost=running_cost,
            terminal_cost=coefficients.terminal,
            prior_potential=cls.gaussian_prior_potential,
            prior_grad=cls.gaussian_prior_grad,
            grad_x_drift=grad_x_drift,
            grad_x_cost=grad_x_cost,
            grad_x_terminal=coefficients.terminal_grad,
            flat_drift=flat_drift,
            flat_cost=flat_cost,
            flat_drift_agrad=flat_drift_agrad,
            flat_cost_agrad=flat_cost_agrad,
            name=f"nn-{act.name}",
        )

    @staticmethod
    def lq_policy_coefficients(params: LqParams, control_dim: int) -> NnPolicyCoefficients:
        """
        Classical LQ coefficients for a network policy: b(x, α) = b·x + c·α,
        f(x, α) = (q_run/2)|x|² + (r_run/2)|α|², g as in the LQ problem

        control_dim is either the state dimension or 1 (a scalar control acting on every coordinate).
        """
        d = params.dim
        if control_dim not in (1, d):
            raise ProblemDefinitionError(f"control_dim must be 1 or {d}, got {control_dim}")
        loading = params.c * (np.eye(d) if control_dim == d else np.ones((d, 1)))
        b, q, r = params.b, params.q_run, params.r_run
        gq, gl = params.g_term_quad, params.g_term_lin

        def base_drift(x, alpha):
            return b * x + alpha @ loading.T

        def base_drift_dx(x, alpha):
            return np.broadcast_to(b * np.eye(d), (x.shape[0], d, d)).copy()

        def base_drift_dalpha(x, alpha):
            return np.broadcast_to(loading, (x.shape[0], d, control_dim)).copy()

        def base_cost(x, alpha):
            return 0.5 * q * np.sum(x * x, axis=-1) + 0.5 * r * np.sum(alpha * alpha, axis=-1)

        def base_cost_dx(x, alpha):
            return q * x

        def base_cost_dalpha(x, alpha):
            return r * alpha

        return NnPolicyCoefficients(
            state_dim=d,
            control_dim=control_dim,
            diffusion=params.gamma_const * np.eye(d),
            base_drift=base_drift,
            base_drift_dx=base_drift_dx,
            base_drift_dalpha=base_drift_dalpha,
            base_cost=base_cost,
            base_cost_dx=base_cost_dx,
            base_cost_dalpha=base_cost_dalpha,
            terminal=lambda x: 0.5 * gq * np.sum(x * x, axis=-1) + gl * np.sum(x, axis=-1),
            terminal_grad=lambda x: gq * x + gl,
        )

    @classmethod
    def add_convex_interaction(cls, spec: ProblemSpec, kappa: float, lam: float) -> ProblemSpec:
        """
        Add the measure-only running cost (kappa/2)∫|a|² m(da) + (lam/2)|∫a m(da)|²

        ∇_x of the added term vanishes, so the adjoint equation is unchanged.

        Args:
            spec (ProblemSpec): Problem to extend
            kappa (float): Confinement weight, >= 0
            lam (float): Mean-interaction weight, >= 0

        Returns:
            ProblemSpec: Extended problem

        Raises:
            ProblemDefinitionError: If a weight is negative
        """
        if kappa < 0 or lam < 0:
            raise ProblemDefinitionError(f"interaction weights must be >= 0, got kappa={kappa}, lam={lam}")
        if kappa == 0 and lam == 0:
            return spec

        base_cost, base_flat, base_agrad = spec.running_cost, spec.flat_cost, spec.flat_cost_agrad

        def running_cost(t, x, m):
            mean = m.mean(axis=1)
            return (
                base_cost(t, x, m)
                + 0.5 * kappa * np.mean(np.sum(m * m, axis=-1), axis=1)
                + 0.5 * lam * np.sum(mean * mean, axis=-1)
            )

        def raw_interaction(t, x, m, a):
            mean = m.mean(axis=1, keepdims=True)
            return 0.5 * kappa * np.sum(a * a, axis=-1) + lam * np.sum(mean * a, axis=-1)

        interaction_flat = cls.centered(raw_interaction)

        def flat_cost(t, x, m, a):
            return base_flat(t, x, m, a) + interaction_flat(t, x, m, a)

        def flat_cost_agrad(t, x, m, a):
            return base_agrad(t, x, m, a) + kappa * a + lam * m.mean(axis=1, keepdims=True)

        previous = spec.interaction or InteractionParams()
        return dataclasses.replace(
            spec,
            running_cost=running_cost,
            flat_cost=flat_cost,
            flat_cost_agrad=flat_cost_agrad,
            name=f"{spec.name}+interaction",
            interaction=InteractionParams(kappa=previous.kappa + kappa, lam=previous.lam + lam),
        )

    # ------------------------------------------------------------------
    # Derivative checks
    # ------------------------------------------------------------------

    @staticmethod
    def _single_point(spec: ProblemSpec, t: float, x) -> tuple:
        tt = np.array([float(t)])
        xx = np.asarray(x, dtype=np.float64).reshape(1, spec.state_dim)
        return tt, xx

    @classmethod
    def check_flat_derivative(
        cls,
        spec: ProblemSpec,
        m: Union[EmpiricalCloud, Array],
        m_prime: Union[EmpiricalCloud, Array],
        t: float,
        x,
        n_lambda: int = 64,
    ) -> float:
        """
        Residual of F(m') - F(m) = ∫₀¹ ∫ δF/δm(m + λ(m' - m), a) (m' - m)(da) dλ

        The λ-integral uses the midpoint rule. The mixture at λ = (2l+1)/(2n) is represented
        exactly by replicating m (2n-2l-1) times and m' (2l+1) times. The identity is checked for
        the running cost and every drift coordinate.

        Args:
            spec (ProblemSpec): Problem whose flat derivatives are checked
            m, m_prime: Clouds with equal particle counts
            t (float): Time
            x: State point of dimension d
            n_lambda (int): Midpoint nodes

        Returns:
            float: Largest absolute residual
        """
        base = m.points if isinstance(m, EmpiricalCloud) else np.asarray(m, dtype=np.float64)
        target = m_prime.points if isinstance(m_prime, EmpiricalCloud) else np.asarray(m_prime, dtype=np.float64)
        if base.shape != target.shape:
            raise ShapeMismatchError(f"clouds must have equal shapes, got {base.shape} and {target.shape}")
        tt, xx = cls._single_point(spec, t, x)
        m0, m1 = base[None], target[None]

        lhs_cost = float(spec.running_cost(tt, xx, m1)[0] - spec.running_cost(tt, xx, m0)[0])
        lhs_drift = spec.drift(tt, xx, m1)[0] - spec.drift(tt, xx, m0)[0]

        rhs_cost = 0.0
        rhs_drift = np.zeros(spec.state_dim)
        for l in range(n_lambda):
            mixture = np.concatenate(
                [np.tile(base, (2 * n_lambda - 2 * l - 1, 1)), np.tile(target, (2 * l + 1, 1))]
            )[None]
            rhs_cost += float(
                spec.flat_cost(tt, xx, mixture, m1).mean() - spec.flat_cost(tt, xx, mixture, m0).mean()
            )
            rhs_drift += (
                spec.flat_drift(tt, xx, mixture, m1)[0].mean(axis=0)
                - spec.flat_drift(tt, xx, mixture, m0)[0].mean(axis=0)
            )
        rhs_cost /= n_lambda
        rhs_drift /= n_lambda

        cost_residual = abs(lhs_cost - rhs_cost)
        drift_residual = float(np.max(np.abs(lhs_drift - rhs_drift))) if spec.state_dim else 0.0
        logger.debug(f"Flat derivative check: cost residual {cost_residual:.3e}, drift residual {drift_residual:.3e}")
        return max(cost_residual, drift_residual)

    @staticmethod
    def bump_flat_derivative(field: Callable[[Array, Array, Array], Array], t: Array, x: Array, m: Array, a: Array) -> Array:
        """
        Finite-difference flat derivative by adding one particle (bump weight 1/(N+1))

        Returns (N+1)(F(m ∪ {a}) - F(m)), the centered flat derivative up to O(1/N).
        Test helper only; the Langevin drift always uses the analytic derivatives.
        """
        n = m.shape[1]
        base = field(t, x, m)
        columns = []
        for l in range(a.shape[1]):
            bumped = np.concatenate([m, a[:, l : l + 1, :]], axis=1)
            columns.append((n + 1) * (field(t, x, bumped) - base))
        return np.stack(columns, axis=1)

    @classmethod
    def central_difference_agrad(cls, flat: FlatField, t: Array, x: Array, m: Array, a: Array, h: Optional[float] = None) -> Array:
        """Central differences of a flat derivative in the action argument, gradient on the last axis"""
        h = cls.FD_STEP if h is None else h
        grads = []
        for q in range(a.shape[-1]):
            step = np.zeros(a.shape[-1])
            step[q] = h
            grads.append((flat(t, x, m, a + step) - flat(t, x, m, a - step)) / (2.0 * h))
        return np.stack(grads, axis=-1)

    @classmethod
    def central_difference_x(cls, field: Callable[[Array], Array], x: Array, h: Optional[float] = None) -> Array:
        """Central differences of a state function x -> field(x), gradient on the last axis"""
        h = cls.FD_STEP if h is None else h
        grads = []
        for l in range(x.shape[-1]):
            step = np.zeros(x.shape[-1])
            step[l] = h
            grads.append((field(x + step) - field(x - step)) / (2.0 * h))
        return np.stack(grads, axis=-1)
