import csv
import os

import pytest

from sapd.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

SMALL = ["--set", "scenarios=[{kind: sparse, K: 2, T: 300, d: 3}]", "--set", "seeds=[0, 1]",
         "--set", "regret=false"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for key in ("algorithms[].c1", "scenarios[].delta_c", "output.dir", "horizons"):
        assert key in out


def test_run_prints_table(tmp_path, capsys):
    assert main(["run", *SMALL, "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "SA-PD" in out and "PD-Fixed" in out and "VQ-OCO" in out


def test_config_errors_exit_2(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
    assert main(["run", "--set", "seeds=[]"]) == EXIT_CONFIG
    assert main(["sweep", *SMALL, "--axis", "K"]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_all_runs_failing_exit_3(tmp_path):
    args = ["run", "--set", "scenarios=[{kind: electricity, path: /none.csv, fallback: false, T: 50}]",
            "--set", "seeds=[0]", "--out", str(tmp_path)]
    assert main(args) == EXIT_RUNTIME


def test_sweep_axis(tmp_path, capsys):
    assert main(["sweep", *SMALL, "--axis", "K=1,2", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "K=1" in out and "K=2" in out


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SAPD_OUTPUT_DIR", str(tmp_path))
    assert main(["gen", *SMALL]) == EXIT_OK
    files = os.listdir(tmp_path)
    assert len(files) == 1
    rows = read_rows(tmp_path / files[0])
    assert len(rows) == 1 + 300
    assert rows[0][:3] == ["t", "b", "b_true"]


def test_detect_summary(capsys):
    assert main(["detect", *SMALL, "--every", "100"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "K_hat=4" in out and "false_positives=0" in out and "mean_delay=1.00" in out


def test_plot_data_row_counts(tmp_path):
    args = ["plot-data", *SMALL, "--set", "horizons=[100, 200, 400]", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    assert len(read_rows(tmp_path / "fig1.csv")) == 1 + 3
    # one seed, three algorithms, every round
    assert len(read_rows(tmp_path / "fig2.csv")) == 1 + 3 * 300
    assert len(read_rows(tmp_path / "fig3.csv")) == 1 + 3 * 3
    assert len(read_rows(tmp_path / "fig4.csv")) == 1 + 3
    marks = [r for r in read_rows(tmp_path / "fig2.csv")[1:] if r[4] == "1"]
    assert len(marks) == 3 * 4


def test_scaling_and_ablate(tmp_path, capsys):
    assert main(["scaling", *SMALL, "--horizons", "100,200,400", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["ablate", *SMALL, "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "exponent" in out and "SA-PD w/o reset" in out
