"""Tests for the fogml command line."""

import json

import pandas as pd
import pytest

from fogml.cli import main, parse_values


@pytest.mark.parametrize(
    "raw,expected",
    [
        ("1,2,5", [1, 2, 5]),
        ("0.5, 1e-2", [0.5, 0.01]),
        ("true,null", [True, None]),
        ("fedavg,fd", ["fedavg", "fd"]),
        ("3,,", [3]),
        ("", []),
    ],
)
def test_parse_values(raw, expected):
    assert parse_values(raw) == expected


def test_run_writes_outputs(write_config, small_config, tmp_path, capsys):
    out = tmp_path / "out"
    path = str(write_config(small_config))
    assert main(["run", path, "--output-dir", str(out)]) == 0
    written = {p.name for p in out.iterdir()}
    assert {"metrics.csv", "ledger.csv", "summary.json"} <= written
    metrics = pd.read_csv(out / "metrics.csv")
    assert metrics["round"].tolist() == [1, 2, 3]
    summary = json.loads((out / "summary.json").read_text())
    assert summary["protocol"] == "fedavg"
    assert summary["master_seed"] == 5
    assert "fedavg: 3 rounds" in capsys.readouterr().out


def test_run_is_byte_reproducible(write_config, small_config, tmp_path):
    path = str(write_config(small_config))
    assert main(["run", path, "--output-dir", str(tmp_path / "a")]) == 0
    assert main(["run", path, "--output-dir", str(tmp_path / "b")]) == 0
    for name in ("metrics.csv", "ledger.csv"):
        first = (tmp_path / "a" / name).read_bytes()
        assert first == (tmp_path / "b" / name).read_bytes()


def test_seed_override(write_config, small_config, tmp_path):
    out = tmp_path / "seeded"
    path = str(write_config(small_config))
    assert main(["run", path, "--seed", "11", "--output-dir", str(out)]) == 0
    assert json.loads((out / "summary.json").read_text())["master_seed"] == 11


def test_local_protocol_sends_nothing(write_config, small_config, tmp_path):
    small_config["protocol"] = "local"
    out = tmp_path / "local"
    path = str(write_config(small_config))
    assert main(["run", path, "--output-dir", str(out)]) == 0
    metrics = pd.read_csv(out / "metrics.csv")
    assert (metrics["cum_uplink_bits"] == 0).all()
    assert (metrics["cum_downlink_bits"] == 0).all()


def test_config_error_exit_code(write_config, small_config, tmp_path, capsys):
    small_config["training"]["momentum"] = 0.9
    path = str(write_config(small_config))
    assert main(["run", path, "--output-dir", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config"
    assert err["detail"]["errors"][0]["loc"] == "training.momentum"


def test_budget_exhausted_exit_code(write_config, small_config, tmp_path):
    small_config["budget"] = {"c_comp": 1.0, "c_comm": 10.0, "total": 1.0}
    path = str(write_config(small_config))
    assert main(["run", path, "--output-dir", str(tmp_path)]) == 4


def test_infeasible_partition_exit_code(write_config, small_config, tmp_path, capsys):
    small_config["partition"]["per_label"] = 100
    path = str(write_config(small_config))
    assert main(["run", path, "--output-dir", str(tmp_path)]) == 3
    assert "detail" in json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_sweep_writes_runs_and_table(write_config, small_config, tmp_path):
    out = tmp_path / "sweep"
    path = str(write_config(small_config))
    argv = ["sweep", path, "--param", "training.tau", "--values", "1,2"]
    assert main(argv + ["--output-dir", str(out)]) == 0
    table = pd.read_csv(out / "sweep.csv")
    assert table["value"].tolist() == [1, 2]
    assert (out / "training.tau=1" / "metrics.csv").exists()
    assert (out / "training.tau=2" / "summary.json").exists()


def test_sweep_without_values(write_config, small_config, tmp_path):
    path = str(write_config(small_config))
    argv = ["sweep", path, "--param", "training.tau", "--values", ","]
    assert main(argv + ["--output-dir", str(tmp_path)]) == 2


def test_sweep_bad_param(write_config, small_config, tmp_path):
    path = str(write_config(small_config))
    argv = ["sweep", path, "--param", "training.nope", "--values", "1"]
    assert main(argv + ["--output-dir", str(tmp_path)]) == 2


def test_sweep_forwards_cache_dir(write_config, small_config, tmp_path, mocker):
    from fogml import cli

    spy = mocker.patch.object(cli, "sweep", wraps=cli.sweep)
    cache = str(tmp_path / "cache")
    path = str(write_config(small_config))
    argv = ["sweep", path, "--param", "master_seed", "--values", "1"]
    argv += ["--output-dir", str(tmp_path / "out"), "--cache-dir", cache]
    assert main(argv) == 0
    spy.assert_called_once()
    assert spy.call_args.kwargs["cache_dir"] == cache
    assert spy.call_args.args[1:] == ("master_seed", [1])
