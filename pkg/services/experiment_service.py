"""
Experiment Service for the relaxed-control solver
Configuration loading, experiment orchestration, the linear-quadratic acceptance battery
and artifact emission
"""

import math
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from loguru import logger
from pydantic import ValidationError

from models.exceptions import ConfigError, StorageError
from models.numerics import BrownianBundle, FlowTrace, ParticleControl
from models.problem import ProblemSpec
from models.pydantic_models import (
    CheckResult,
    CheckStatus,
    ContractionResult,
    ExperimentConfig,
    LqParams,
    ProblemKind,
    VerificationReport,
)
from services.diagnostics_service import DiagnosticsService
from services.flow_service import FlowService
from services.forward_backward_service import ForwardBackwardService
from services.measure_service import MeasureService
from services.noise_service import NoiseService
from services.objective_service import ObjectiveService
from services.problem_service import ProblemService
from storage.config_file import read_config_file
from storage.csv_io import format_number, write_rows
from storage.schemas import (
    CLOUDS_FILE,
    CONTRACTION_COLUMNS,
    CONTRACTION_FILE,
    FLOW_TRACE_COLUMNS,
    FLOW_TRACE_FILE,
    SUMMARY_FILE,
    VERIFY_FILE,
    check_artifacts_exist,
    ensure_output_directory,
)

ConfigSource = Union[str, Path, ExperimentConfig]


class ExperimentService:
    """Service class for configured runs and the acceptance battery"""

    # Configuration
    GIBBS_STDERRS = 3.0
    GIBBS_RESIDUAL_LIMIT = 0.08
    MONOTONICITY_FRACTION = 0.05
    MONOTONICITY_STDERRS = 4.0
    FOC_RATIO_LIMIT = 0.1
    CONTRACTION_HORIZON = 2.0
    CONTRACTION_SHIFT = 2.0
    CONTRACTION_RATE_TOLERANCE = 0.15
    CONTRACTION_RATIO_LIMIT = 0.1
    ENTROPY_SAMPLES = 4096
    ENTROPY_TOLERANCE = 0.05
    BSDE_STRESS = {"b": 0.3, "q_run": 0.5, "g_term_quad": 1.0}
    BSDE_PARTICLES = 16
    BSDE_TOLERANCE = 0.02
    IDENTITY_PARTICLES = 16
    IDENTITY_B = (-0.3, 0.3)
    IDENTITY_Q_RUN = (0.0, 0.5)
    IDENTITY_G_TERM_QUAD = (0.0, 1.0)

    # ------------------------------------------------------------------
    # Configuration and setup
    # ------------------------------------------------------------------

    @staticmethod
    def load_config(config_path: Union[str, Path]) -> ExperimentConfig:
        """
        Read and validate a key=value configuration file

        Raises:
            ConfigError: Naming the first missing, unknown or invalid key
        """
        raw = read_config_file(config_path)
        for key in ExperimentConfig.REQUIRED_KEYS:
            if key not in raw:
                raise ConfigError(f"missing key: {key}")
        try:
            return ExperimentConfig(**raw)
        except ValidationError as e:
            error = e.errors()[0]
            key = ".".join(str(part) for part in error["loc"]) or "config"
            if error["type"] == "extra_forbidden":
                raise ConfigError(f"unknown key: {key}")
            raise ConfigError(f"invalid value for {key}: {error['msg']}")

    @classmethod
    def _resolve(cls, source: ConfigSource) -> ExperimentConfig:
        return source if isinstance(source, ExperimentConfig) else cls.load_config(source)

    @staticmethod
    def build_problem(config: ExperimentConfig) -> ProblemSpec:
        """LQ problem, or the network-policy problem on the LQ coefficients, plus the interaction cost"""
        params = config.to_lq_params()
        if config.problem == ProblemKind.LQ:
            spec = ProblemService.build_lq_problem(params)
        else:
            activation = ProblemService.resolve_activation(config.activation)
            control_dim = 1 if activation.uses_state else config.p
            coefficients = ProblemService.lq_policy_coefficients(params, control_dim)
            spec = ProblemService.build_nn_policy_problem(coefficients, activation, action_dim=config.p)
        interaction = config.to_interaction()
        return ProblemService.add_convex_interaction(spec, interaction.kappa, interaction.lam)

    @staticmethod
    def prepare(config: ExperimentConfig, spec: ProblemSpec) -> Tuple[BrownianBundle, ParticleControl]:
        """Outer noise and the prior-sampled initial control"""
        grid = NoiseService.make_time_grid(config.T, config.K)
        noise = NoiseService.sample_brownian(config.seed, grid, config.M, spec.noise_dim)
        init = MeasureService.init_control(
            MeasureService.gaussian_sampler(), grid, config.M, config.N, config.seed, spec.action_dim, config.q_metric
        )
        return noise, init

    @staticmethod
    def gibbs_reference(config: ExperimentConfig, spec: ProblemSpec, grid) -> Optional[ParticleControl]:
        if spec.lq_params is None:
            return None
        return DiagnosticsService.lq_gibbs_reference(
            spec.lq_params, config.sigma, grid, config.M, config.N, config.seed, spec.interaction, config.q_metric
        )

    # ------------------------------------------------------------------
    # Artifacts
    # ------------------------------------------------------------------

    @staticmethod
    def emit_trace(trace: FlowTrace, path: Union[str, Path]) -> int:
        """flow_trace.csv, s ascending"""
        rows = ([getattr(row, column) for column in FLOW_TRACE_COLUMNS] for row in trace.rows)
        return write_rows(path, FLOW_TRACE_COLUMNS, rows)

    @staticmethod
    def emit_clouds(control: ParticleControl, path: Union[str, Path]) -> int:
        """clouds.csv in j, k, i order"""
        return MeasureService.export_clouds(control, path)

    @staticmethod
    def emit_contraction(result: ContractionResult, path: Union[str, Path]) -> int:
        """contraction.csv, s ascending"""
        return write_rows(path, CONTRACTION_COLUMNS, zip(result.s_values, result.rho))

    @staticmethod
    def _write_text(path: Path, text: str) -> None:
        try:
            path.write_text(text, encoding="utf-8")
        except OSError as e:
            raise StorageError(f"Failed to write {path}: {e}")

    # ------------------------------------------------------------------
    # Run
    # ------------------------------------------------------------------

    @classmethod
    def run_experiment(cls, source: ConfigSource) -> int:
        """
        Run the configured flow and write flow_trace.csv, clouds.csv and summary.txt

        Args:
            source: Config file path or an already validated config

        Returns:
            int: 0 on success (errors are raised as SolverError subclasses)
        """
        config = cls._resolve(source)
        spec = cls.build_problem(config)
        output = ensure_output_directory(config.output_dir)
        flow_config = config.to_flow_config()
        noise, init = cls.prepare(config, spec)
        reference = cls.gibbs_reference(config, spec, noise.grid)
        logger.info(f"Experiment '{spec.name}': M={config.M}, K={config.K}, N={config.N}, output={output}")

        checkpoint = DiagnosticsService.checkpointer(spec, flow_config, noise, config.xi, reference)
        trace, state = FlowService.run_flow(spec, flow_config, noise, init, config.xi, checkpoint)
        cls.emit_trace(trace, output / FLOW_TRACE_FILE)
        cls.emit_clouds(state.control, output / CLOUDS_FILE)

        monotonicity = DiagnosticsService.monotonicity_report(trace)
        moments = DiagnosticsService.moment_trace(trace)
        first, last = trace.rows[0], trace.last
        summary = [
            f"problem: {spec.name}",
            f"s_final: {format_number(last.s)}",
            f"checkpoints: {len(trace)}",
            f"J_sigma_initial: {format_number(first.J_sigma)}",
            f"J_sigma_final: {format_number(last.J_sigma)}",
            f"J_stderr_final: {format_number(last.J_stderr)}",
            f"moment_q_final: {format_number(last.moment_q)}",
            f"moment_bounded: {str(moments.bounded).lower()}",
            f"moment_bound: {format_number(moments.bound)}",
            f"foc_spread_initial: {format_number(first.foc_spread)}",
            f"foc_spread_final: {format_number(last.foc_spread)}",
            f"gibbs_residual_final: {format_number(last.gibbs_residual)}",
            f"rho_to_ref_final: {format_number(last.rho_to_ref)}",
            f"monotonicity_violations: {monotonicity.violations}/{monotonicity.pairs}",
            f"monotonicity_max_excess_stderr: {format_number(monotonicity.max_excess_stderr)}",
        ]
        cls._write_text(output / SUMMARY_FILE, "\n".join(summary) + "\n")
        missing = [name for name, present in check_artifacts_exist(output).items() if not present]
        if missing:
            raise StorageError(f"Artifacts missing from {output}: {', '.join(missing)}")
        logger.info(f"📁 Artifacts written to {output}")
        return 0

    @classmethod
    def export_noise(cls, source: ConfigSource, path: Union[str, Path]) -> int:
        """Write the configured outer Brownian increments as a binary dump"""
        config = cls._resolve(source)
        spec = cls.build_problem(config)
        grid = NoiseService.make_time_grid(config.T, config.K)
        NoiseService.dump_brownian(NoiseService.sample_brownian(config.seed, grid, config.M, spec.noise_dim), path)
        return 0

    # ------------------------------------------------------------------
    # LQ acceptance battery
    # ------------------------------------------------------------------

    @staticmethod
    def _check(name: str, measured: float, target: float, tolerance: float, detail: str = "") -> CheckResult:
        ok = math.isfinite(measured) and abs(measured - target) <= tolerance
        return CheckResult(
            name=name,
            measured=float(measured),
            target=float(target),
            tolerance=float(tolerance),
            status=CheckStatus.PASS if ok else CheckStatus.FAIL,
            detail=detail,
        )

    @staticmethod
    def _skip(name: str, detail: str) -> CheckResult:
        nan = float("nan")
        return CheckResult(name=name, measured=nan, target=nan, tolerance=nan, status=CheckStatus.SKIP, detail=detail)

    @classmethod
    def _gibbs_checks(
        cls, config: ExperimentConfig, spec: ProblemSpec, control: ParticleControl, scale: float
    ) -> List[CheckResult]:
        params = spec.lq_params
        if not params.costate_is_control_free:
            detail = "costate depends on the control"
            return [cls._skip(name, detail) for name in ("gibbs_mean", "gibbs_variance", "moment_limit")]
        grid = control.grid
        costate = params.g_term_lin * np.exp(params.b * (grid.horizon - grid.nodes[: grid.steps]))
        laws = np.array([DiagnosticsService.lq_gibbs_law(params, config.sigma, float(y), spec.interaction) for y in costate])
        means, variance = laws[:, 0], float(laws[0, 1])

        theta = control.theta
        centered = theta - means[None, :, None, None]
        count = centered.size
        pooled_var = float(centered.var())
        se_mean = math.sqrt(pooled_var / count)
        se_var = pooled_var * math.sqrt(2.0 / (count - 1))
        results = [
            cls._check("gibbs_mean", float(theta.mean()), float(means.mean()),
                       cls.GIBBS_STDERRS * se_mean * scale, "pooled cloud mean vs closed-form Gibbs mean"),
            cls._check("gibbs_variance", pooled_var, variance,
                       cls.GIBBS_STDERRS * se_var * scale, "pooled variance about the Gibbs means"),
        ]
        if config.q_metric == 2.0:
            squares = np.sum(theta**2, axis=-1)
            target = float(params.dim * np.mean(means**2 + variance))
            se_moment = float(squares.std() / math.sqrt(squares.size))
            results.append(cls._check("moment_limit", float(squares.mean()), target,
                                      cls.GIBBS_STDERRS * se_moment * scale, "second moment vs Gibbs second moment"))
        else:
            results.append(cls._skip("moment_limit", "q_metric != 2"))
        return results

    @classmethod
    def _contraction_checks(
        cls, config: ExperimentConfig, spec: ProblemSpec, noise: BrownianBundle, init: ParticleControl, scale: float
    ) -> Tuple[List[CheckResult], Optional[ContractionResult]]:
        params = spec.lq_params
        if not params.costate_is_control_free:
            detail = "costate depends on the control"
            return [cls._skip("contraction_rate", detail), cls._skip("contraction_ratio", detail)], None
        flow_config = config.to_flow_config().model_copy(
            update={"total_s": cls.CONTRACTION_HORIZON,
                    "checkpoint_stride": max(
                        1, int(round(cls.CONTRACTION_HORIZON / config.ds)) // ExperimentConfig.CHECKPOINTS_PER_RUN
                    )}
        )
        shifted = init.with_theta(init.theta + cls.CONTRACTION_SHIFT)
        result = DiagnosticsService.contraction_estimate(spec, flow_config, noise, init, shifted, config.xi)
        predicted = DiagnosticsService.lq_predicted_rate(params, config.sigma, spec.interaction)
        ratio = result.rho[-1] / result.rho[0] if result.rho and result.rho[0] > 0 else float("nan")
        return [
            cls._check("contraction_rate", result.fitted_rate, predicted,
                       cls.CONTRACTION_RATE_TOLERANCE * predicted * scale, "fitted vs synchronous-coupling rate"),
            cls._check("contraction_ratio", ratio, 0.0, cls.CONTRACTION_RATIO_LIMIT * scale,
                       f"rho(s={cls.CONTRACTION_HORIZON:g}) / rho(0)"),
        ], result

    @classmethod
    def _entropy_check(cls, config: ExperimentConfig, spec: ProblemSpec, scale: float) -> CheckResult:
        params = spec.lq_params
        mean, variance = DiagnosticsService.lq_gibbs_law(params, config.sigma, params.g_term_lin, spec.interaction)
        rng = NoiseService.substream(config.seed, NoiseService.STREAM_PROBES, 0)
        cloud = mean + math.sqrt(variance) * rng.standard_normal((cls.ENTROPY_SAMPLES, 1))
        measured = MeasureService.entropy_estimate(cloud, spec.prior_potential)
        closed_form = 0.5 * (variance + mean**2 - 1.0 - math.log(variance))
        return cls._check("entropy_calibration", measured, closed_form, cls.ENTROPY_TOLERANCE * scale,
                          f"KDE entropy of N({mean:.4g}, {variance:.4g}) vs Gaussian KL")

    @classmethod
    def _bsde_check(cls, config: ExperimentConfig, spec: ProblemSpec, scale: float) -> CheckResult:
        params = spec.lq_params.model_copy(update=cls.BSDE_STRESS)
        stress = ProblemService.build_lq_problem(params)
        grid = NoiseService.make_time_grid(config.T, config.K)
        noise = NoiseService.sample_brownian(config.seed, grid, config.regression_paths, stress.noise_dim)
        # one cloud per node shared by every path, so E[Y | X] is a function of X alone
        shared = MeasureService.init_control(
            MeasureService.gaussian_sampler(), grid, 1, cls.BSDE_PARTICLES, config.seed, params.dim
        )
        control = shared.with_theta(np.repeat(shared.theta, config.regression_paths, axis=0))
        traj = ForwardBackwardService.simulate_forward(stress, control, noise, config.xi)
        reference = ForwardBackwardService.solve_adjoint_riccati(params, traj, control)
        estimate = ForwardBackwardService.solve_adjoint_regression(stress, traj, control)
        error = ForwardBackwardService.adjoint_discrepancy(reference, estimate)
        return cls._check("bsde_regression", error, 0.0, cls.BSDE_TOLERANCE * scale,
                          f"max_k mean relative |Y_reg - Y_riccati|, M={config.regression_paths}")

    @classmethod
    def random_lq_instance(cls, params: LqParams, rng: np.random.Generator) -> ProblemSpec:
        """LQ problem with b, q_run and g_term_quad redrawn, so the costate depends on X and J⁰ is not affine"""
        instance = params.model_copy(update={
            "b": float(rng.uniform(*cls.IDENTITY_B)),
            "q_run": float(rng.uniform(*cls.IDENTITY_Q_RUN)),
            "g_term_quad": float(rng.uniform(*cls.IDENTITY_G_TERM_QUAD)),
        })
        return ProblemService.build_lq_problem(instance)

    @classmethod
    def _identity_check(cls, config: ExperimentConfig, spec: ProblemSpec, noise: BrownianBundle, scale: float) -> CheckResult:
        grid, M, p = noise.grid, config.M, spec.action_dim
        shape = (M, grid.steps, cls.IDENTITY_PARTICLES, p)
        interaction = spec.interaction
        worst = 0.0
        for pair in range(config.identity_pairs):
            rng = NoiseService.substream(config.seed, NoiseService.STREAM_PROBES, 1, pair)
            instance = cls.random_lq_instance(spec.lq_params, rng)
            if interaction is not None:
                instance = ProblemService.add_convex_interaction(instance, interaction.kappa, interaction.lam)
            nu_mean, mu_mean = rng.uniform(-1.0, 1.0, size=2)
            nu_std, mu_std = rng.uniform(0.5, 1.5, size=2)
            nu = ParticleControl(theta=nu_mean + nu_std * rng.standard_normal(shape), grid=grid, q_metric=config.q_metric)
            mu = ParticleControl(theta=mu_mean + mu_std * rng.standard_normal(shape), grid=grid, q_metric=config.q_metric)
            fd = ObjectiveService.directional_derivative_fd(instance, nu, mu, noise, config.xi, config.identity_epsilon)
            pairing = ObjectiveService.hamiltonian_pairing(instance, nu, mu, noise, config.xi)
            gap, band = ObjectiveService.identity_gap(fd, pairing)
            worst = max(worst, gap / band if band > 0 else (0.0 if gap == 0 else math.inf))
        return cls._check("derivative_identity", worst, 0.0, 1.0 * scale,
                          f"max over {config.identity_pairs} random LQ instances of |FD - pairing| / max(5%, 3 stderr)")

    @classmethod
    def verify_lq(cls, source: ConfigSource) -> VerificationReport:
        """
        Run the LQ acceptance battery and write verify_lq.txt (plus flow_trace.csv and contraction.csv)

        Every tolerance is multiplied by the config's tolerance_scale.

        Raises:
            ConfigError: If the config is not an LQ problem
        """
        config = cls._resolve(source)
        if config.problem != ProblemKind.LQ:
            raise ConfigError(f"invalid value for problem: verify-lq needs problem=lq, got {config.problem.value}")
        scale = config.tolerance_scale
        spec = cls.build_problem(config)
        output = ensure_output_directory(config.output_dir)
        flow_config = config.to_flow_config()
        noise, init = cls.prepare(config, spec)
        reference = cls.gibbs_reference(config, spec, noise.grid)
        logger.info(f"🚀 LQ verification started: {spec.name}, tolerance_scale={scale:g}")

        checkpoint = DiagnosticsService.checkpointer(spec, flow_config, noise, config.xi, reference)
        trace, state = FlowService.run_flow(spec, flow_config, noise, init, config.xi, checkpoint)
        cls.emit_trace(trace, output / FLOW_TRACE_FILE)
        checks = cls._gibbs_checks(config, spec, state.control, scale)

        last, first = trace.last, trace.rows[0]
        checks.append(cls._check("gibbs_residual", last.gibbs_residual, 0.0, cls.GIBBS_RESIDUAL_LIMIT * scale,
                                 "mean TV distance to the Gibbs target"))
        monotonicity = DiagnosticsService.monotonicity_report(trace)
        fraction = monotonicity.violations / monotonicity.pairs if monotonicity.pairs else 0.0
        checks.append(cls._check("monotonicity_fraction", fraction, 0.0, cls.MONOTONICITY_FRACTION * scale,
                                 f"{monotonicity.violations} of {monotonicity.pairs} checkpoint pairs"))
        checks.append(cls._check("monotonicity_excess", monotonicity.max_excess_stderr, 0.0,
                                 cls.MONOTONICITY_STDERRS * scale, "worst rise in combined stderr"))
        moments = DiagnosticsService.moment_trace(trace)
        peak = max(moments.series) / moments.bound if moments.bound > 0 else float("nan")
        checks.append(cls._check("moment_bounded", peak, 0.0, DiagnosticsService.MOMENT_FACTOR * scale,
                                 "max moment / max(initial, early plateau)"))
        foc_ratio = last.foc_spread / first.foc_spread if first.foc_spread > 0 else float("nan")
        checks.append(cls._check("foc_ratio", foc_ratio, 0.0, cls.FOC_RATIO_LIMIT * scale,
                                 "final / initial FOC spread"))

        contraction_checks, contraction = cls._contraction_checks(config, spec, noise, init, scale)
        checks.extend(contraction_checks)
        if contraction is not None:
            cls.emit_contraction(contraction, output / CONTRACTION_FILE)
        checks.append(cls._entropy_check(config, spec, scale))
        checks.append(cls._bsde_check(config, spec, scale))
        checks.append(cls._identity_check(config, spec, noise, scale))

        report = VerificationReport(checks=checks)
        table = cls.format_report(report)
        cls._write_text(output / VERIFY_FILE, table)
        status = "✅ all checks passed" if report.passed else "❌ some checks failed"
        logger.info(f"LQ verification finished: {status}")
        return report

    @staticmethod
    def format_report(report: VerificationReport) -> str:
        """Plain-text table: check, measured, target, tolerance, status"""
        header = f"{'check':<24} {'measured':>14} {'target':>14} {'tolerance':>14}  status"
        lines = [header, "-" * len(header)]
        for check in report.checks:
            lines.append(
                f"{check.name:<24} {check.measured:>14.6g} {check.target:>14.6g} {check.tolerance:>14.6g}  "
                f"{check.status.value}" + (f"  ({check.detail})" if check.detail else "")
            )
        lines.append(f"overall: {'PASS' if report.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"
