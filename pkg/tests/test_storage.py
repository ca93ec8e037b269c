"""
Tests for config parsing, CSV artifacts and the noise dump format
"""
import pytest

import numpy as np

from models.exceptions import ConfigError, StorageError
from storage.config_file import read_config_file
from storage.csv_io import format_number, read_header, read_rows, write_rows
from storage.noise_dump import read_brownian_dump, write_brownian_dump
from storage.schemas import CONTRACTION_COLUMNS, check_artifacts_exist, ensure_output_directory


def test_config_file_comments_and_whitespace(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# header\n\n problem = lq  # inline\nT=1.0\n", encoding="utf-8")
    assert read_config_file(path) == {"problem": "lq", "T": "1.0"}


@pytest.mark.parametrize(
    "text, message",
    [
        ("problem lq\n", "line 1: expected key=value"),
        ("=1\n", "line 1: empty key"),
        ("K=1\nK=2\n", "duplicate key: K"),
    ],
)
def test_config_file_errors(tmp_path, text, message):
    path = tmp_path / "bad.cfg"
    path.write_text(text, encoding="utf-8")
    with pytest.raises(ConfigError) as error:
        read_config_file(path)
    assert error.value.detail.startswith(message)


def test_format_number():
    assert format_number(3) == "3"
    assert format_number(True) == "1"
    assert float(format_number(0.1)) == 0.1
    assert format_number(float("nan")) == "nan"


def test_write_rows_checks_width(tmp_path):
    with pytest.raises(StorageError):
        write_rows(tmp_path / "c.csv", CONTRACTION_COLUMNS, [(0.0, 1.0, 2.0)])


def test_empty_table_has_header_only(tmp_path):
    path = tmp_path / "nested" / "c.csv"
    assert write_rows(path, CONTRACTION_COLUMNS, []) == 0
    assert read_header(path) == ["s", "rho_q"]
    assert read_rows(path) == []


def test_read_rows_rejects_text(tmp_path):
    path = tmp_path / "c.csv"
    path.write_text("s,rho_q\n0,abc\n", encoding="utf-8")
    with pytest.raises(StorageError):
        read_rows(path)


def test_artifact_directory(tmp_path):
    output = ensure_output_directory(tmp_path / "a" / "b")
    assert output.is_dir()
    assert check_artifacts_exist(output) == {"flow_trace.csv": False, "clouds.csv": False, "summary.txt": False}
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(StorageError):
        ensure_output_directory(blocker / "sub")


def test_noise_dump_rejects_truncated_files(tmp_path):
    path = tmp_path / "noise.bin"
    write_brownian_dump(path, np.zeros((2, 3, 1)), 7)
    increments, seed = read_brownian_dump(path)
    assert increments.shape == (2, 3, 1) and seed == 7
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(StorageError):
        read_brownian_dump(path)
    path.write_bytes(b"\x00" * 10)
    with pytest.raises(StorageError):
        read_brownian_dump(path)
