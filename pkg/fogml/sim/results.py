"""Result helper classes for simulation runs."""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from fogml.config import LEDGER_COLUMNS, METRICS_COLUMNS

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = (
    "value",
    "rounds",
    "final_test_acc",
    "cum_uplink_bits",
    "cum_downlink_bits",
    "cum_cost",
    "mean_privacy",
    "dummy_seed_bytes",
)


def _dump_json(data: Any, path: Path) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class RunResult:
    """Outputs of one simulation run with helpers to export them."""

    def __init__(
        self,
        protocol: str,
        metrics: pd.DataFrame,
        ledger: pd.DataFrame,
        summary: Dict[str, Any],
        privacy: Optional[Dict[str, Any]] = None,
        blocks: Optional[Sequence[Dict[str, Any]]] = None,
    ) -> None:
        self.protocol = protocol
        self._metrics = metrics
        self._ledger = ledger
        self.summary = summary
        self.privacy = privacy
        self.blocks: List[Dict[str, Any]] = list(blocks or [])

    @property
    def metrics(self) -> pd.DataFrame:
        return self._metrics

    @property
    def ledger(self) -> pd.DataFrame:
        return self._ledger

    @property
    def rounds(self) -> int:
        return len(self._metrics)

    @property
    def final(self) -> Optional[Dict[str, Any]]:
        """Last metrics row, or None if no round ran."""
        if self._metrics.empty:
            return None
        return self._metrics.iloc[-1].to_dict()

    def to_dataframe(self) -> pd.DataFrame:
        """Per-round metrics with columns in their fixed order."""
        return self._metrics[list(METRICS_COLUMNS)]

    def write(self, output_dir: Union[str, Path]) -> Path:
        """Write metrics.csv, ledger.csv and summary.json (plus privacy.json
        and blocks.jsonl when the protocol produced them)."""
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_dataframe().to_csv(out / "metrics.csv", index=False)
        self._ledger[list(LEDGER_COLUMNS)].to_csv(out / "ledger.csv", index=False)
        _dump_json(self.summary, out / "summary.json")
        if self.privacy is not None:
            _dump_json(self.privacy, out / "privacy.json")
        if self.blocks:
            with open(out / "blocks.jsonl", "w", encoding="utf-8") as fh:
                for row in self.blocks:
                    fh.write(json.dumps(row, sort_keys=True) + "\n")
        logger.info("wrote %s results to %s", self.protocol, out)
        return out

    def sweep_row(self, value: Any) -> Dict[str, Any]:
        final = self.final or {}
        privacy = self.privacy or {}
        return {
            "value": value,
            "rounds": self.rounds,
            "final_test_acc": final.get("test_acc"),
            "cum_uplink_bits": final.get("cum_uplink_bits", 0),
            "cum_downlink_bits": final.get("cum_downlink_bits", 0),
            "cum_cost": final.get("cum_cost", 0.0),
            "mean_privacy": privacy.get("mean_privacy"),
            "dummy_seed_bytes": privacy.get("dummy_seed_bytes"),
        }


class SweepResult:
    """One RunResult per swept value."""

    def __init__(
        self, key: str, values: Sequence[Any], runs: Sequence[RunResult]
    ) -> None:
        self.key = key
        self.values = list(values)
        self.runs = list(runs)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(
            [run.sweep_row(v) for v, run in zip(self.values, self.runs)],
            columns=list(SWEEP_COLUMNS),
        )

    def write(self, output_dir: Union[str, Path]) -> Path:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_dataframe().to_csv(out / "sweep.csv", index=False)
        return out
