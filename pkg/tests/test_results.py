"""Tests for result helper classes."""

import json

import pandas as pd

from fogml.config import LEDGER_COLUMNS, METRICS_COLUMNS
from fogml.sim.results import SWEEP_COLUMNS, RunResult, SweepResult


def _metrics(rows):
    return pd.DataFrame(
        [
            {
                "round": r,
                "tau": 2,
                "cum_uplink_bits": 100 * r,
                "cum_downlink_bits": 1000 * r,
                "cum_cost": 12.0 * r,
                "train_loss": 1.0 / r,
                "test_acc": 0.5 + 0.1 * r,
                "sim_time": 0.25 * r,
            }
            for r in range(1, rows + 1)
        ],
        columns=list(METRICS_COLUMNS),
    )


def _ledger():
    return pd.DataFrame(
        [
            {
                "round": 1,
                "src": "d0",
                "dst": "server",
                "direction": "uplink",
                "bytes": 12,
                "sim_time": 0.1,
            }
        ],
        columns=list(LEDGER_COLUMNS),
    )


def _result(rows=2, **kwargs):
    summary = {"protocol": "fedavg", "rounds": rows}
    return RunResult("fedavg", _metrics(rows), _ledger(), summary, **kwargs)


def test_run_result_properties():
    result = _result(3)
    assert result.rounds == 3
    assert result.final["round"] == 3
    assert list(result.to_dataframe().columns) == list(METRICS_COLUMNS)
    assert result.ledger.iloc[0]["bytes"] == 12


def test_empty_run_has_no_final_row():
    result = _result(0)
    assert result.rounds == 0
    assert result.final is None
    row = result.sweep_row(1)
    assert row["final_test_acc"] is None
    assert row["cum_uplink_bits"] == 0


def test_write_outputs(tmp_path):
    out = _result(2).write(tmp_path / "run")
    names = sorted(p.name for p in out.iterdir())
    assert names == ["ledger.csv", "metrics.csv", "summary.json"]
    metrics = pd.read_csv(out / "metrics.csv")
    assert list(metrics.columns) == list(METRICS_COLUMNS)
    assert metrics["round"].tolist() == [1, 2]
    header = (out / "ledger.csv").read_text().splitlines()[0]
    assert header == ",".join(LEDGER_COLUMNS)
    summary = json.loads((out / "summary.json").read_text())
    assert summary == {"protocol": "fedavg", "rounds": 2}


def test_write_privacy_and_blocks(tmp_path):
    blocks = [{"round": 1, "winner": 0, "pow_time": 0.2, "rewards": {"0": 1.0}}]
    privacy = {"mean_privacy": 0.5, "dummy_seed_bytes": 40}
    result = _result(1, privacy=privacy, blocks=blocks)
    out = result.write(tmp_path)
    assert json.loads((out / "privacy.json").read_text())["mean_privacy"] == 0.5
    lines = (out / "blocks.jsonl").read_text().splitlines()
    assert [json.loads(line) for line in lines] == blocks


def test_sweep_row_and_frame(tmp_path):
    privacy = {"mean_privacy": 0.5, "dummy_seed_bytes": 10}
    runs = [_result(1, privacy=privacy), _result(3)]
    sweep = SweepResult("faug.hops", [1, 2], runs)
    df = sweep.to_dataframe()
    assert list(df.columns) == list(SWEEP_COLUMNS)
    assert df["value"].tolist() == [1, 2]
    assert df["rounds"].tolist() == [1, 3]
    assert df["cum_uplink_bits"].tolist() == [100, 300]
    assert df["mean_privacy"].iloc[0] == 0.5
    assert pd.isna(df["mean_privacy"].iloc[1])
    sweep.write(tmp_path)
    assert pd.read_csv(tmp_path / "sweep.csv")["rounds"].tolist() == [1, 3]
