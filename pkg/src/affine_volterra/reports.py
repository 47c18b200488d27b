"""Experiment reports: per-case rows, declared checks and CSV/JSON artifacts"""

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import pandas as pd

from src.affine_volterra.config import VERSION
from src.affine_volterra.metrics import MetricsRecorder

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.17g"


@dataclass
class ExperimentReport:
    """Result of one subcommand"""
    command: str
    seed: Optional[int] = None
    threads: int = 1
    rows: list[dict] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    artifacts: dict[str, pd.DataFrame] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def add_row(self, **values):
        self.rows.append(values)

    def check(self, name: str, passed: bool) -> bool:
        """Declare a pass/fail check; every declared check feeds the exit status"""
        passed = bool(passed)
        self.checks[name] = self.checks.get(name, True) and passed
        MetricsRecorder.record_check(name, passed)
        if not passed:
            logger.error(f"[{self.command}] check failed: {name}")
        return passed

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows)

    def to_dict(self, timestamp: Optional[str] = None) -> dict:
        return {
            "command": self.command,
            "version": VERSION,
            "seed": self.seed,
            "threads": self.threads,
            "timestamp": timestamp,
            "passed": self.passed,
            "checks": self.checks,
            "n_rows": len(self.rows),
            "notes": self.notes,
        }

    def to_json(self, timestamp: Optional[str] = None) -> str:
        return json.dumps(self.to_dict(timestamp), indent=2)

    def write(self, out_dir: Path) -> list[Path]:
        """Write <command>.csv, extra <command>_<name>.csv artifacts and <command>_meta.json"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []

        main = out_dir / f"{self.command}.csv"
        self.to_frame().to_csv(main, index=False, float_format=CSV_FLOAT_FORMAT)
        written.append(main)
        for name, frame in self.artifacts.items():
            path = out_dir / f"{self.command}_{name}.csv"
            frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT)
            written.append(path)

        meta = out_dir / f"{self.command}_meta.json"
        meta.write_text(self.to_json(datetime.now(timezone.utc).isoformat()))
        written.append(meta)
        logger.info(f"Report {self.command}: {len(self.rows)} rows, passed={self.passed}, written to {out_dir}")
        return written
