"""
Pydantic models for the mean-field Langevin relaxed-control solver
Defines problem parameters, flow/experiment configuration and report models with validation
"""

import math
from enum import Enum
from typing import ClassVar, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Enums for mode fields
class ProblemKind(str, Enum):
    LQ = "lq"
    NN = "nn"


class AdjointMode(str, Enum):
    RICCATI = "riccati"
    REGRESSION = "regression"


class CheckStatus(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    SKIP = "SKIP"


# Problem parameter models
class LqParams(BaseModel):
    """
    Linear-quadratic instance: drift b·x + c·mean(m), running cost
    (q_run/2)|x|² + (r_run/2)∫|a|² m(da), terminal cost
    (g_term_quad/2)|x|² + g_term_lin·Σx, diffusion gamma_const·I,
    standard Gaussian prior. State and action share the dimension `dim`.
    """

    model_config = ConfigDict(frozen=True)

    b: float = Field(0.0, description="State feedback in the drift")
    c: float = Field(1.0, description="Loading of the control mean in the drift")
    q_run: float = Field(0.0, ge=0, description="State quadratic running weight")
    r_run: float = Field(1.0, description="Control quadratic running weight")
    g_term_quad: float = Field(0.0, ge=0, description="Terminal quadratic weight")
    g_term_lin: float = Field(1.0, description="Terminal linear weight")
    gamma_const: float = Field(1.0, gt=0, description="Constant diffusion level")
    dim: int = Field(1, ge=1, description="State and action dimension")

    @field_validator("r_run")
    @classmethod
    def validate_r_run(cls, v):
        if not v > 0:
            raise ValueError("r_run must be positive (strong convexity in the action)")
        return v

    @field_validator("b", "c", "g_term_lin")
    @classmethod
    def validate_finite(cls, v):
        if not math.isfinite(v):
            raise ValueError("must be finite")
        return v

    @property
    def costate_is_control_free(self) -> bool:
        """True when the adjoint does not depend on the control (Y = g_term_lin·e^{b(T-t)})"""
        return self.q_run == 0.0 and self.g_term_quad == 0.0


class InteractionParams(BaseModel):
    """Convex measure-only running cost (kappa/2)∫|a|² m(da) + (lam/2)|∫a m(da)|²"""

    model_config = ConfigDict(frozen=True)

    kappa: float = Field(0.0, ge=0)
    lam: float = Field(0.0, ge=0)


# Flow configuration
class FlowConfig(BaseModel):
    """Mean-field Langevin flow settings"""

    model_config = ConfigDict(frozen=True)

    sigma: float = Field(..., ge=0, description="Temperature (0 only for drift-only tests)")
    ds: float = Field(..., gt=0, description="Langevin step in algorithmic time")
    total_s: float = Field(..., ge=0, description="Algorithmic horizon S")
    refresh_stride: int = Field(1, ge=1, description="Langevin steps between forward/backward refreshes")
    adjoint_mode: AdjointMode = AdjointMode.RICCATI
    checkpoint_stride: int = Field(1, ge=1, description="Langevin steps between trace checkpoints")
    inner_seed: int = Field(0, ge=0, description="Seed of the inner (Langevin) noise")
    q_metric: float = Field(2.0, ge=2, description="Order of the moments and the metric")
    diagnostic_paths: int = Field(8, ge=1, description="Outer paths used for checkpoint FOC/Gibbs diagnostics")

    @model_validator(mode="after")
    def validate_horizon(self):
        if 0 < self.total_s < self.ds:
            raise ValueError("total_s must be 0 or at least ds")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.total_s / self.ds))


# Experiment configuration (flat key=value file)
class ExperimentConfig(BaseModel):
    """Validated experiment configuration; field names are the config-file keys"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    # Required keys
    problem: ProblemKind
    T: float = Field(..., gt=0)
    K: int = Field(..., ge=1)
    M: int = Field(..., ge=1)
    N: int = Field(..., ge=2)
    sigma: float = Field(..., gt=0, description="Entropy regularization needs sigma > 0")
    ds: float = Field(..., gt=0)
    total_s: float = Field(..., ge=0)
    seed: int = Field(..., ge=0)

    # Optional keys
    p: int = Field(1, ge=1)
    d: int = Field(1, ge=1)
    q_metric: float = Field(2.0, ge=2)
    refresh_stride: int = Field(1, ge=1)
    checkpoint_stride: Optional[int] = Field(None, ge=1)
    adjoint_mode: Optional[AdjointMode] = None
    xi: float = 0.0
    b: float = 0.0
    c: float = 1.0
    q_run: float = Field(0.0, ge=0)
    r_run: float = 1.0
    g_term_quad: float = Field(0.0, ge=0)
    g_term_lin: float = 1.0
    gamma_const: float = Field(1.0, gt=0)
    interaction_kappa: float = Field(0.0, ge=0)
    interaction_lambda: float = Field(0.0, ge=0)
    activation: str = "tanh"
    diagnostic_paths: int = Field(8, ge=1)
    identity_pairs: int = Field(20, ge=1)
    identity_epsilon: float = Field(1e-3, gt=0, lt=1)
    regression_paths: int = Field(10000, ge=10)
    tolerance_scale: float = Field(1.0, gt=0)
    log_level: str = "INFO"
    output_dir: str = "output"

    REQUIRED_KEYS: ClassVar[Tuple[str, ...]] = ("problem", "T", "K", "M", "N", "sigma", "ds", "total_s", "seed")
    CHECKPOINTS_PER_RUN: ClassVar[int] = 40

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v):
        allowed = {"TRACE", "DEBUG", "INFO", "SUCCESS", "WARNING", "ERROR", "CRITICAL"}
        if v.upper() not in allowed:
            raise ValueError(f"log_level must be one of {sorted(allowed)}")
        return v.upper()

    @model_validator(mode="after")
    def validate_problem_dimensions(self):
        if self.problem == ProblemKind.LQ and self.d != self.p:
            raise ValueError("lq problem needs d == p")
        if 0 < self.total_s < self.ds:
            raise ValueError("total_s must be 0 or at least ds")
        return self

    def to_lq_params(self) -> LqParams:
        return LqParams(
            b=self.b, c=self.c, q_run=self.q_run, r_run=self.r_run,
            g_term_quad=self.g_term_quad, g_term_lin=self.g_term_lin,
            gamma_const=self.gamma_const, dim=self.d,
        )

    def to_interaction(self) -> InteractionParams:
        return InteractionParams(kappa=self.interaction_kappa, lam=self.interaction_lambda)

    def to_flow_config(self) -> FlowConfig:
        n_steps = int(round(self.total_s / self.ds))
        stride = self.checkpoint_stride or max(1, n_steps // self.CHECKPOINTS_PER_RUN)
        mode = self.adjoint_mode
        if mode is None:
            mode = AdjointMode.RICCATI if self.problem == ProblemKind.LQ else AdjointMode.REGRESSION
        return FlowConfig(
            sigma=self.sigma, ds=self.ds, total_s=self.total_s,
            refresh_stride=self.refresh_stride, adjoint_mode=mode,
            checkpoint_stride=stride, inner_seed=self.seed + 1,
            q_metric=self.q_metric, diagnostic_paths=min(self.diagnostic_paths, self.M),
        )


# Report models
class ObjectiveEstimate(BaseModel):
    """Monte Carlo estimate of the objective over outer paths"""
    estimate: float
    stderr: float
    entropy_infinite: bool = False


class MonotonicityReport(BaseModel):
    """Consecutive-checkpoint increases of the objective beyond the noise band"""
    pairs: int
    violations: int
    max_violation: float = Field(..., ge=0, description="Worst increase beyond the band")
    max_excess_stderr: float = Field(..., description="Worst increase in units of combined stderr")


class MomentTraceReport(BaseModel):
    """Boundedness of the q-moment series along the flow"""
    bounded: bool
    bound: float
    series: List[float]


class ContractionResult(BaseModel):
    """Distance between two synchronously coupled flows"""
    s_values: List[float]
    rho: List[float]
    fitted_rate: float
    fit_points: int
    truncated: bool = False


class CheckResult(BaseModel):
    """One row of a verification table"""
    name: str
    measured: float
    target: float
    tolerance: float
    status: CheckStatus
    detail: str = ""


class VerificationReport(BaseModel):
    """Result table of an acceptance battery"""
    checks: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(check.status != CheckStatus.FAIL for check in self.checks)


class DerivativeEstimate(BaseModel):
    """Monte Carlo estimate of a directional derivative of the objective"""
    estimate: float
    stderr: float
