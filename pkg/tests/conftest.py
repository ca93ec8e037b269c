"""
Shared fixtures: small grids, LQ problems, seeded noise and controls
"""

import pytest

from models.pydantic_models import FlowConfig, LqParams
from services.measure_service import MeasureService
from services.noise_service import NoiseService
from services.problem_service import ProblemService

SEED = 1234


@pytest.fixture
def grid():
    return NoiseService.make_time_grid(1.0, 5)


@pytest.fixture
def lq_params():
    """Costate-independent instance: Y = 1 on every path"""
    return LqParams(b=0.0, c=1.0, q_run=0.0, r_run=1.0, g_term_quad=0.0, g_term_lin=1.0)


@pytest.fixture
def lq_spec(lq_params):
    return ProblemService.build_lq_problem(lq_params)


@pytest.fixture
def stress_params():
    return LqParams(b=0.3, c=1.0, q_run=0.5, r_run=1.0, g_term_quad=1.0, g_term_lin=1.0)


@pytest.fixture
def noise(grid):
    return NoiseService.sample_brownian(SEED, grid, 16, 1)


@pytest.fixture
def control(grid):
    return MeasureService.init_control(MeasureService.gaussian_sampler(), grid, 16, 32, SEED)


@pytest.fixture
def flow_config():
    return FlowConfig(sigma=1.0, ds=0.01, total_s=0.1, checkpoint_stride=5, inner_seed=SEED + 1, diagnostic_paths=4)


BASE_CONFIG = {
    "problem": "lq",
    "T": "1.0",
    "K": "4",
    "M": "8",
    "N": "16",
    "sigma": "1.0",
    "ds": "0.01",
    "total_s": "0.05",
    "seed": "3",
    "diagnostic_paths": "4",
}


@pytest.fixture
def write_config(tmp_path):
    """Factory writing a small experiment config into tmp_path; output goes to tmp_path/out"""

    def write(drop=(), **overrides):
        values = {**BASE_CONFIG, "output_dir": str(tmp_path / "out"), **overrides}
        lines = ["# test configuration"] + [f"{key}={value}" for key, value in values.items() if key not in drop]
        path = tmp_path / "experiment.cfg"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    return write
