"""Tests for the ablation and comparison experiments"""

import csv

import pytest

from tts_alignment_lab.ablation import (
    ALL_REMOVED,
    ARMS,
    AblationRow,
    AblationTable,
    ArmOutcome,
    ArmRunner,
    TrainEvalRunner,
    ablate,
    arm_config,
    compare_encoder_modes,
    sweep_bottleneck,
)
from tts_alignment_lab.config import TrainConfig
from tts_alignment_lab.errors import ConfigurationError, ParameterError
from tts_alignment_lab.trainer import EvalReport

ARM_R = {"full": 0.7, "-DC": 0.5, "-LN": 0.6, "-PB": 0.55, "-DC-LN-PB": 0.35}
ARM_BY_FLAGS = {
    tuple(flags.get(name, True) for name in ("use_dc", "use_ln", "use_pb")): arm for arm, flags in ARMS.items()
}


def fake_report(r):
    return EvalReport(
        split="valid",
        teacher_forced=False,
        window_enabled=True,
        mean_r=r,
        mel_loss=0.2,
        stop_accuracy=0.9,
        position_similarity={"baseline": 0.1, "learnable_weight": 0.2, "layer_norm": 0.6},
    )


class FlagRunner:
    """Scores a run from its ablation flags alone"""

    def __call__(self, config, dataset):
        arm = ARM_BY_FLAGS[(config.use_dc, config.use_ln, config.use_pb)]
        return ArmOutcome(report=fake_report(ARM_R[arm] + 0.01 * config.seed))


# ===== CONFIG EXPANSION =====

def test_arm_set():
    assert list(ARMS) == ["full", "-DC", "-LN", "-PB", "-DC-LN-PB"]


def test_full_and_no_dc_differ_only_in_the_constraint(small_train_config):
    full = arm_config(small_train_config, "full", 4)
    no_dc = arm_config(small_train_config, "-DC", 4)
    diff = {k for k, v in full.model_dump().items() if no_dc.model_dump()[k] != v}
    assert diff == {"use_dc"}
    assert full.effective_dc_weight > 0 and no_dc.effective_dc_weight == 0
    assert full.window_at_inference and not no_dc.window_at_inference
    assert full.effective_model_config() == no_dc.effective_model_config()


def test_all_removed_arm(small_train_config):
    config = arm_config(small_train_config, ALL_REMOVED, 0)
    model = config.effective_model_config()
    assert model.encoder_input_mode == "baseline"
    assert model.prenet_widths[1] == model.hidden_size


def test_unknown_arm(small_train_config):
    with pytest.raises(ParameterError):
        arm_config(small_train_config, "-XY", 0)


def test_arm_log_paths_are_per_run(small_train_config, tmp_path):
    base = small_train_config.model_copy(update={"log_path": tmp_path / "m.jsonl"})
    paths = {arm_config(base, arm, seed).log_path for arm in ARMS for seed in (0, 1)}
    assert len(paths) == 10


# ===== ABLATION TABLE =====

def test_ablate_emits_one_row_per_arm_and_seed(small_train_config, small_dataset, tmp_path):
    table = ablate(small_train_config, [0, 1, 2], small_dataset, runner=FlagRunner(), workers=1)
    assert len(table) == 15
    assert [row.arm for row in table.rows[:3]] == ["full"] * 3

    path = table.to_csv(tmp_path / "ablation.csv")
    with path.open(newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert list(rows[0]) == ["arm", "seed", "r", "mel_loss", "stop_acc"]
    assert len(rows) == 15


def test_ordering_report(small_train_config, small_dataset):
    report = ablate(small_train_config, [0, 1, 2], small_dataset, runner=FlagRunner(), workers=1).ordering_report()
    assert report.medians["full"] == pytest.approx(0.71)
    assert report.gap == pytest.approx(0.35)
    assert report.passed


def test_ordering_report_flags_a_small_gap():
    rows = [AblationRow(arm, 0, 0.5, 0.1, 1.0) for arm in ARMS]
    report = AblationTable(rows=rows).ordering_report()
    assert not report.gap_ok and not report.passed


def test_runner_is_called_with_the_shared_dataset(small_train_config, small_dataset, mocker):
    runner = mocker.Mock(return_value=ArmOutcome(report=fake_report(0.5)))
    ablate(small_train_config, [0], small_dataset, runner=runner, workers=1)
    assert runner.call_count == 5
    assert all(call.args[1] is small_dataset for call in runner.call_args_list)


def test_default_runner_scores_the_first_valid_samples(small_train_config, small_dataset, mocker):
    trained = mocker.Mock()
    trained.model.alpha_value = None
    trained.config = small_train_config
    mocker.patch("tts_alignment_lab.ablation.train", return_value=trained)
    evaluate = mocker.patch("tts_alignment_lab.ablation.evaluate", return_value=fake_report(0.5))

    config = small_train_config.model_copy(update={"valid_samples": 3})
    outcome = TrainEvalRunner()(config, small_dataset)
    assert evaluate.call_args.kwargs["limit"] == 3
    assert evaluate.call_args.kwargs["split"] == "valid"
    assert outcome.report.mean_r == 0.5

    TrainEvalRunner(limit=7)(config, small_dataset)
    assert evaluate.call_args.kwargs["limit"] == 7


def test_ablate_needs_seeds(small_train_config, small_dataset):
    with pytest.raises(ParameterError):
        ablate(small_train_config, [], small_dataset, runner=FlagRunner())


def test_runners_satisfy_the_protocol():
    assert isinstance(TrainEvalRunner(), ArmRunner)
    assert isinstance(FlagRunner(), ArmRunner)


# ===== OTHER EXPERIMENTS =====

def test_compare_encoder_modes(small_train_config, small_dataset, mocker):
    runner = mocker.Mock(return_value=ArmOutcome(report=fake_report(0.4), alpha=1.2))
    table = compare_encoder_modes(small_train_config, [0, 1], small_dataset, runner=runner, workers=1)
    modes = [call.args[0].model.encoder_input_mode for call in runner.call_args_list]
    assert modes == ["baseline"] * 2 + ["learnable_weight"] * 2 + ["layer_norm"] * 2
    assert table.medians("position_similarity") == {"baseline": 0.1, "learnable_weight": 0.2, "layer_norm": 0.6}


def test_sweep_bottleneck(small_train_config, small_dataset, mocker):
    runner = mocker.Mock(return_value=ArmOutcome(report=fake_report(0.4)))
    table = sweep_bottleneck(small_train_config, [1, 2, 3], [0], small_dataset, runner=runner, workers=1)
    assert [row.size for row in table.rows] == [1, 2, 3]
    widths = [call.args[0].effective_model_config().prenet_widths for call in runner.call_args_list]
    assert [w[1] for w in widths] == [1, 2, 3]


def test_sweep_rejects_too_wide_bottleneck(small_train_config, small_dataset, mocker):
    with pytest.raises(ConfigurationError):
        sweep_bottleneck(small_train_config, [4], [0], small_dataset, runner=mocker.Mock(), workers=1)


# ===== END TO END =====

@pytest.mark.slow
def test_ablation_ordering_holds_at_desk_scale():
    """Median autoregressive r over three seeds, all five arms"""
    table = ablate(TrainConfig.desk(), [0, 1, 2])
    report = table.ordering_report()
    assert set(report.medians) == set(ARMS)
    assert report.gap >= 0.1
    assert report.full_beats_single_removals
    assert report.passed
