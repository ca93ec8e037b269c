"""
Tests for the command line entry point and its exit codes
"""
import pytest

from app import build_parser, main


def test_parser_subcommands():
    args = build_parser().parse_args(["verify-lq", "run.cfg", "--tolerance-scale", "2"])
    assert args.command == "verify-lq"
    assert args.tolerance_scale == 2.0
    with pytest.raises(SystemExit):
        build_parser().parse_args(["train", "run.cfg"])


def test_missing_key_exits_with_config_code(tmp_path, capsys, write_config):
    assert main(["run", str(write_config(drop=("sigma",)))]) == 2
    assert "missing key: sigma" in capsys.readouterr().err


def test_verify_rejects_non_positive_tolerance_scale(tmp_path, write_config):
    assert main(["verify-lq", str(write_config()), "--tolerance-scale", "0"]) == 2


def test_run_command(tmp_path, write_config):
    assert main(["run", str(write_config(total_s="0"))]) == 0
    assert (tmp_path / "out" / "summary.txt").exists()


def test_export_noise_command(tmp_path, capsys, write_config):
    target = tmp_path / "noise.bin"
    assert main(["export-noise", str(write_config()), str(target)]) == 0
    assert target.stat().st_size == 4 * 8 + 8 * 4 * 1 * 8
    assert "noise.bin" in capsys.readouterr().out


def test_storage_failure_exit_code(tmp_path, write_config):
    blocker = tmp_path / "blocker"
    blocker.write_text("x")
    assert main(["run", str(write_config(total_s="0", output_dir=blocker / "out"))]) == 4


def test_verify_failure_exit_code(tmp_path, write_config):
    path = write_config(N="32", total_s="0.02", regression_paths="200", identity_pairs="1")
    assert main(["verify-lq", str(path), "--tolerance-scale", "0.01"]) == 1
    assert (tmp_path / "out" / "verify_lq.txt").read_text().endswith("overall: FAIL\n")
