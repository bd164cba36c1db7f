"""
Metrics Tracker for training runs

Accumulates per-step loss components, keeps the history in memory and appends
one JSON object per step to the metrics log.
"""

import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

logger = logging.getLogger(__name__)

LOG_FIELDS = ("step", "lr", "mel_loss", "stop_loss", "dc_loss", "r_valid")


class MetricsTracker:
    """
    Track loss components of a training run

    Every tracked step becomes a record with the LOG_FIELDS keys. r_valid is
    None on steps without a validation pass.
    """

    def __init__(self, log_path: Optional[Path] = None):
        self.log_path = Path(log_path) if log_path is not None else None
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            self.log_path.write_text("", encoding="utf-8")

        self.history: List[Dict[str, Any]] = []
        self.total_steps = 0
        self.validation_passes = 0
        self.best_r_valid: Optional[float] = None
        self.started_at = datetime.now()

    def track_step(
        self,
        step: int,
        lr: float,
        mel_loss: float,
        stop_loss: float,
        dc_loss: float,
        r_valid: Optional[float] = None,
    ) -> Dict[str, Any]:
        """
        Track a single optimizer step

        Args:
            step: 1-based optimizer step
            lr: learning rate used for the update
            mel_loss / stop_loss / dc_loss: loss components before weighting
            r_valid: teacher-forced validation diagonal rate, when measured
        """
        record = {
            "step": step,
            "lr": lr,
            "mel_loss": mel_loss,
            "stop_loss": stop_loss,
            "dc_loss": dc_loss,
            "r_valid": r_valid,
        }
        self.history.append(record)
        self.total_steps += 1
        if r_valid is not None:
            self.validation_passes += 1
            if self.best_r_valid is None or r_valid > self.best_r_valid:
                self.best_r_valid = r_valid

        if self.log_path is not None:
            with self.log_path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record) + "\n")
        return record

    def loss_curve(self, key: str = "mel_loss") -> List[float]:
        return [record[key] for record in self.history]

    def get_stats(self) -> Dict[str, Any]:
        """
        Get summary statistics

        Returns:
            Dictionary with step counts, last and best values
        """
        last = self.history[-1] if self.history else {}
        return {
            "total_steps": self.total_steps,
            "validation_passes": self.validation_passes,
            "last_mel_loss": last.get("mel_loss"),
            "last_stop_loss": last.get("stop_loss"),
            "last_dc_loss": last.get("dc_loss"),
            "best_r_valid": self.best_r_valid,
            "log_path": str(self.log_path) if self.log_path else None,
            "elapsed_seconds": round((datetime.now() - self.started_at).total_seconds(), 2),
        }

    def print_stats(self) -> None:
        """Print formatted statistics to console"""
        stats = self.get_stats()

        print("\n" + "=" * 60)
        print("📈 TRAINING SUMMARY")
        print("=" * 60)

        print("\n📊 Steps:")
        print(f"  Optimizer steps: {stats['total_steps']}")
        print(f"  Validation passes: {stats['validation_passes']}")

        print("\n🎯 Last losses:")
        for name in ("last_mel_loss", "last_stop_loss", "last_dc_loss"):
            value = stats[name]
            print(f"  {name[5:]}: {value:.6f}" if value is not None else f"  {name[5:]}: n/a")

        best = stats["best_r_valid"]
        print(f"\n📐 Best validation r: {best:.4f}" if best is not None else "\n📐 Best validation r: n/a")
        print(f"⏱️  Elapsed: {stats['elapsed_seconds']}s")
        print("=" * 60 + "\n")


def read_metrics_log(path: Path) -> List[Dict[str, Any]]:
    """Parse a JSONL metrics log back into records."""
    with Path(path).open(encoding="utf-8") as handle:
        return [json.loads(line) for line in handle if line.strip()]
