"""
Column schemas and output layout for solver artifacts
"""

from pathlib import Path
from typing import Dict, Tuple, Union

from models.exceptions import StorageError

FLOW_TRACE_COLUMNS: Tuple[str, ...] = (
    "s", "J_sigma", "J_stderr", "moment_q", "foc_spread", "gibbs_residual", "rho_to_ref",
)
CONTRACTION_COLUMNS: Tuple[str, ...] = ("s", "rho_q")

FLOW_TRACE_FILE = "flow_trace.csv"
CLOUDS_FILE = "clouds.csv"
CONTRACTION_FILE = "contraction.csv"
SUMMARY_FILE = "summary.txt"
VERIFY_FILE = "verify_lq.txt"


def cloud_columns(action_dim: int) -> Tuple[str, ...]:
    """j, k, i, a_1..a_p"""
    return ("j", "k", "i") + tuple(f"a_{q + 1}" for q in range(action_dim))


def path_columns(state_dim: int) -> Tuple[str, ...]:
    """j, k, x_1..x_d, y_1..y_d"""
    return (
        ("j", "k")
        + tuple(f"x_{l + 1}" for l in range(state_dim))
        + tuple(f"y_{l + 1}" for l in range(state_dim))
    )


def ensure_output_directory(output_dir: Union[str, Path]) -> Path:
    """
    Create the artifact directory if missing

    Raises:
        StorageError: If the directory cannot be created
    """
    path = Path(output_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"Failed to create output directory {path}: {e}")
    return path


def check_artifacts_exist(output_dir: Union[str, Path]) -> Dict[str, bool]:
    """Which of the standard run artifacts are present"""
    path = Path(output_dir)
    return {name: (path / name).exists() for name in (FLOW_TRACE_FILE, CLOUDS_FILE, SUMMARY_FILE)}
