"""
Ablation and comparison experiments.

Each experiment expands a base TrainConfig into independent (variant, seed) runs,
trains and evaluates every run on the same dataset, and collects one row per
run. Runs share no mutable state, so they can go to a process pool
(ATLAB_THREADS > 1); rows always come back in (variant, seed) order.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import repeat
from pathlib import Path
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np
from pydantic import ValidationError

from tts_alignment_lab.config import ENCODER_INPUT_MODES, ModelConfig, TrainConfig
from tts_alignment_lab.errors import ConfigurationError, ParameterError
from tts_alignment_lab.settings import get_settings
from tts_alignment_lab.synthdata import Dataset, make_dataset
from tts_alignment_lab.trainer import EvalReport, evaluate, train

logger = logging.getLogger(__name__)

ARMS: Dict[str, Dict[str, bool]] = {
    "full": {},
    "-DC": {"use_dc": False},
    "-LN": {"use_ln": False},
    "-PB": {"use_pb": False},
    "-DC-LN-PB": {"use_dc": False, "use_ln": False, "use_pb": False},
}
SINGLE_REMOVALS = ("-DC", "-LN", "-PB")
ALL_REMOVED = "-DC-LN-PB"
MIN_FULL_GAP = 0.1
DESK_BOTTLENECK_SIZES = (2, 4, 8, 12)


@dataclass
class ArmOutcome:
    report: EvalReport
    alpha: Optional[float] = None
    prenet_widths: List[int] = field(default_factory=list)


@runtime_checkable
class ArmRunner(Protocol):
    """Trains and evaluates one run - enables stubbing in tests"""

    def __call__(self, config: TrainConfig, dataset: Dataset) -> ArmOutcome:
        ...


class TrainEvalRunner:
    """Default runner: train, then evaluate the first `limit` (default `valid_samples`) utterances of a split."""

    def __init__(self, split: str = "valid", teacher_forced: bool = False, limit: Optional[int] = None):
        self.split = split
        self.teacher_forced = teacher_forced
        self.limit = limit

    def __call__(self, config: TrainConfig, dataset: Dataset) -> ArmOutcome:
        result = train(config, dataset, progress=False)
        report = evaluate(
            result.checkpoint,
            dataset,
            split=self.split,
            teacher_forced=self.teacher_forced,
            limit=self.limit or config.valid_samples,
        )
        return ArmOutcome(
            report=report,
            alpha=result.model.alpha_value,
            prenet_widths=result.config.effective_model_config().prenet_widths,
        )


# ===== RESULT TABLES =====

@dataclass
class AblationRow:
    arm: str
    seed: int
    r: float
    mel_loss: float
    stop_acc: float


@dataclass
class ModeRow:
    mode: str
    seed: int
    position_similarity: float
    r: float
    alpha: Optional[float]


@dataclass
class BottleneckRow:
    size: int
    seed: int
    r: float
    mel_loss: float


@dataclass
class ResultTable:
    rows: List[Any]
    key: str = "arm"

    def __len__(self) -> int:
        return len(self.rows)

    def columns(self) -> List[str]:
        return [f.name for f in fields(self.rows[0])] if self.rows else []

    def to_csv(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=self.columns())
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: ("none" if v is None else v) for k, v in asdict(row).items()})
        logger.info("wrote %d rows to %s", len(self.rows), path)
        return path

    def medians(self, value: str = "r") -> Dict[Any, float]:
        """Median of `value` per variant, in first-seen order."""
        groups: Dict[Any, List[float]] = {}
        for row in self.rows:
            groups.setdefault(getattr(row, self.key), []).append(getattr(row, value))
        return {name: float(np.median(values)) for name, values in groups.items()}


@dataclass
class OrderingReport:
    medians: Dict[str, float]
    gap: float
    gap_ok: bool
    full_beats_single_removals: bool

    @property
    def passed(self) -> bool:
        return self.gap_ok and self.full_beats_single_removals


class AblationTable(ResultTable):
    def ordering_report(self) -> OrderingReport:
        """Check r(full) - r(all removed) >= 0.1 and r(full) >= every single removal."""
        medians = self.medians("r")
        missing = [arm for arm in ("full", ALL_REMOVED, *SINGLE_REMOVALS) if arm not in medians]
        if missing:
            raise ParameterError(f"ablation table lacks arms {missing}")
        gap = medians["full"] - medians[ALL_REMOVED]
        beats = all(medians["full"] >= medians[arm] for arm in SINGLE_REMOVALS)
        return OrderingReport(medians=medians, gap=gap, gap_ok=gap >= MIN_FULL_GAP, full_beats_single_removals=beats)


# ===== EXPERIMENTS =====

def _log_path(base: TrainConfig, tag: str, seed: int) -> Optional[Path]:
    if base.log_path is None:
        return None
    path = Path(base.log_path)
    return path.with_name(f"{path.stem}.{tag}.seed{seed}{path.suffix or '.jsonl'}")


def arm_config(base: TrainConfig, arm: str, seed: int) -> TrainConfig:
    """The base config with an arm's flags switched off and the run seed set."""
    if arm not in ARMS:
        raise ParameterError(f"unknown ablation arm {arm!r}; have {list(ARMS)}")
    update: Dict[str, Any] = dict(ARMS[arm], seed=seed, checkpoint_path=None)
    update["log_path"] = _log_path(base, arm, seed)
    return base.model_copy(update=update)


def _with_model(base: TrainConfig, **changes: Any) -> TrainConfig:
    try:
        model = ModelConfig(**{**base.model.model_dump(), **changes})
    except ValidationError as exc:
        raise ConfigurationError(f"invalid model variant {changes}: {exc}") from exc
    return base.model_copy(update={"model": model})


def run_jobs(
    configs: Sequence[TrainConfig],
    dataset: Dataset,
    runner: ArmRunner,
    workers: Optional[int] = None,
) -> List[ArmOutcome]:
    """Run every config through the runner, in parallel processes when workers > 1."""
    workers = get_settings().threads if workers is None else workers
    workers = max(1, min(workers, len(configs)))
    if workers == 1:
        return [runner(config, dataset) for config in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(runner, configs, repeat(dataset)))


def _prepare(base: TrainConfig, seeds: Sequence[int], dataset: Optional[Dataset]) -> Dataset:
    if not seeds:
        raise ParameterError("at least one seed is required")
    return dataset if dataset is not None else make_dataset(base.task)


def ablate(
    base: TrainConfig,
    seeds: Sequence[int],
    dataset: Optional[Dataset] = None,
    runner: Optional[ArmRunner] = None,
    arms: Sequence[str] = tuple(ARMS),
    workers: Optional[int] = None,
) -> AblationTable:
    """Train and evaluate every arm under every seed on one shared dataset."""
    dataset = _prepare(base, seeds, dataset)
    jobs: List[Tuple[str, int]] = [(arm, seed) for arm in arms for seed in seeds]
    configs = [arm_config(base, arm, seed) for arm, seed in jobs]
    outcomes = run_jobs(configs, dataset, runner or TrainEvalRunner(), workers)
    rows = [
        AblationRow(arm, seed, o.report.mean_r, o.report.mel_loss, o.report.stop_accuracy)
        for (arm, seed), o in zip(jobs, outcomes)
    ]
    return AblationTable(rows=rows, key="arm")


def compare_encoder_modes(
    base: TrainConfig,
    seeds: Sequence[int],
    dataset: Optional[Dataset] = None,
    runner: Optional[ArmRunner] = None,
    workers: Optional[int] = None,
) -> ResultTable:
    """Per encoder input mode: similarity of the combined input to p, r and learned alpha."""
    dataset = _prepare(base, seeds, dataset)
    jobs = [(mode, seed) for mode in ENCODER_INPUT_MODES for seed in seeds]
    configs = [
        _with_model(base, encoder_input_mode=mode).model_copy(
            update={"use_ln": True, "seed": seed, "checkpoint_path": None,
                    "log_path": _log_path(base, mode, seed)}
        )
        for mode, seed in jobs
    ]
    outcomes = run_jobs(configs, dataset, runner or TrainEvalRunner(), workers)
    rows = [
        ModeRow(mode, seed, o.report.position_similarity.get(mode, float("nan")), o.report.mean_r, o.alpha)
        for (mode, seed), o in zip(jobs, outcomes)
    ]
    return ResultTable(rows=rows, key="mode")


def sweep_bottleneck(
    base: TrainConfig,
    sizes: Sequence[int] = DESK_BOTTLENECK_SIZES,
    seeds: Sequence[int] = (0,),
    dataset: Optional[Dataset] = None,
    runner: Optional[ArmRunner] = None,
    workers: Optional[int] = None,
) -> ResultTable:
    """Diagonal rate as a function of the pre-net bottleneck width."""
    dataset = _prepare(base, seeds, dataset)
    jobs = [(size, seed) for size in sizes for seed in seeds]
    configs = [
        _with_model(base, prenet_bottleneck_size=size, prenet_bottleneck_enabled=True).model_copy(
            update={"use_pb": True, "seed": seed, "checkpoint_path": None,
                    "log_path": _log_path(base, f"pb{size}", seed)}
        )
        for size, seed in jobs
    ]
    outcomes = run_jobs(configs, dataset, runner or TrainEvalRunner(), workers)
    rows = [
        BottleneckRow(size, seed, o.report.mean_r, o.report.mel_loss)
        for (size, seed), o in zip(jobs, outcomes)
    ]
    return ResultTable(rows=rows, key="size")
