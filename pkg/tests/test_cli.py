"""Command line interface: exit codes, outputs, and config handling."""

import subprocess
import sys

import numpy as np
import pytest

from tracklasso import cli
from tracklasso.scenarios import scenario_defaults, simulate_wiener
from tracklasso.smoothers import plain_smoother


def run_cli(*argv):
    return cli.main(list(argv))


def test_simulate_writes_dataset(tmp_path):
    out = tmp_path / "sim"
    assert run_cli("simulate", "--scenario", "wiener", "--seed", "4",
                   "--steps", "25", "--out", str(out)) == 0
    for name in ("measurements.csv", "truth.csv", "config.txt"):
        assert (out / name).exists()
    y = np.genfromtxt(out / "measurements.csv", delimiter=",", names=True)
    assert len(y) == 25


def test_simulate_rerun_is_byte_identical(tmp_path):
    out = tmp_path / "sim"
    run_cli("simulate", "--scenario", "range", "--seed", "2",
            "--steps", "20", "--out", str(out))
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    run_cli("simulate", "--scenario", "range", "--seed", "2",
            "--steps", "20", "--out", str(out))
    second = {p.name: p.read_bytes() for p in out.iterdir()}
    assert first == second


def test_solve_outputs_and_report(tmp_path):
    out = tmp_path / "run"
    assert run_cli("solve", "--scenario", "wiener", "--seed", "1",
                   "--steps", "30", "--kmax", "10", "--out", str(out)) == 0
    for name in ("trajectory.csv", "iterations.csv", "sparsity.csv",
                 "report.txt", "config.txt"):
        assert (out / name).exists()
    report = (out / "report.txt").read_text()
    assert "iterations" in report
    config = (out / "config.txt").read_text()
    assert "seed=1" in config and f"out={out}" in config


def test_solve_zero_weight_matches_plain_smoother(tmp_path):
    out = tmp_path / "mu0"
    assert run_cli("solve", "--scenario", "wiener", "--seed", "6",
                   "--steps", "40", "--mu", "0", "--kmax", "5",
                   "--out", str(out)) == 0
    rows = np.genfromtxt(out / "trajectory.csv", delimiter=",", skip_header=1)
    x_cli = rows[:, 1:5]
    data, model = simulate_wiener(scenario_defaults("wiener", T=40, seed=6))
    x_ref = plain_smoother(model, data.y).m_smooth
    np.testing.assert_allclose(x_cli, x_ref, atol=1e-8)


def test_solve_reads_csv_input(tmp_path):
    out_sim = tmp_path / "sim"
    run_cli("simulate", "--scenario", "wiener", "--seed", "3",
            "--steps", "20", "--out", str(out_sim))
    out = tmp_path / "run"
    assert run_cli("solve", "--input", str(out_sim / "measurements.csv"),
                   "--kmax", "5", "--out", str(out)) == 0
    assert (out / "trajectory.csv").exists()


def test_config_file_and_flag_precedence(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("scenario = wiener\nseed = 3\nsteps = 25\n"
                   "mu = 2.5\nsolver = batch_madmm\n")
    out = tmp_path / "run"
    assert run_cli("solve", "--config", str(cfg), "--mu", "0.5",
                   "--kmax", "5", "--out", str(out)) == 0
    echoed = dict(line.split("=", 1) for line in
                  (out / "config.txt").read_text().splitlines() if "=" in line)
    assert echoed["mu"] == "0.5"          # flag beats file
    assert echoed["solver"] == "batch_madmm"  # file beats default
    assert echoed["seed"] == "3"


def test_usage_errors_exit_64(tmp_path):
    assert run_cli("solve", "--out", str(tmp_path / "x")) == 64
    assert run_cli("solve", "--scenario", "wiener", "--input", "a.csv",
                   "--out", str(tmp_path / "y")) == 64
    assert run_cli("solve", "--scenario", "range", "--solver", "ks_madmm",
                   "--out", str(tmp_path / "z")) == 64
    assert run_cli("simulate", "--scenario", "wiener", "--steps", "-5",
                   "--out", str(tmp_path / "w")) == 64


def test_missing_input_file_exits_2(tmp_path):
    assert run_cli("solve", "--input", str(tmp_path / "absent.csv"),
                   "--out", str(tmp_path / "out")) == 2


def test_bad_flag_exits_64_from_entry_point():
    proc = subprocess.run(
        [sys.executable, "-m", "tracklasso.cli", "frobnicate"],
        capture_output=True, text=True)
    assert proc.returncode == 64
    proc = subprocess.run([sys.executable, "-m", "tracklasso.cli"],
                          capture_output=True, text=True)
    assert proc.returncode == 64


def test_verify_clean_passes(tmp_path, capsys):
    assert run_cli("verify", "--seed", "0", "--out", str(tmp_path)) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[-1] == "all checks passed"
    assert sum("pass" in l for l in lines[:-1]) == len(lines) - 1


def test_verify_injected_fault_fails(tmp_path, capsys):
    out = tmp_path / "dump"
    assert run_cli("verify", "--seed", "0", "--inject-fault",
                   "--out", str(out)) == 1
    text = capsys.readouterr().out
    assert "FAIL" in text
    assert any(p.name.startswith("failed_") and p.suffix == ".npz"
               for p in out.iterdir())


def test_benchmark_writes_tables(tmp_path, capsys):
    out = tmp_path / "bench"
    assert run_cli("benchmark", "--sizes", "100,200", "--solvers", "ks_madmm",
                   "--repeats", "3", "--kmax", "2", "--out", str(out)) == 0
    assert (out / "benchmark.csv").exists()
    assert (out / "slopes.csv").exists()
    assert "log-log slope" in capsys.readouterr().out


def test_benchmark_rejects_single_repeat(tmp_path):
    assert run_cli("benchmark", "--sizes", "100", "--repeats", "1",
                   "--out", str(tmp_path / "b")) == 64


def test_parse_groups():
    assert cli.parse_groups("2,3") == ((2, 3),)
    assert cli.parse_groups("0,1;2,3") == ((0, 1), (2, 3))
    with pytest.raises(cli.UsageError):
        cli.parse_groups("2,a")
    with pytest.raises(cli.UsageError):
        cli.parse_groups(";")
