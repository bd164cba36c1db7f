"""
Experiment configuration records and the flat key=value config file format.

A config file has three sections, one per record:

    [task]
    vocab_size = 20
    num_speakers = 8

    [model]
    hidden_size = 32

    [train]
    dc_weight = 0.1
    bandwidth = none      # none -> ceil(0.1 * mean S) of the train split

Every key maps to exactly one field; unknown keys are rejected.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from tts_alignment_lab.errors import ConfigurationError

EncoderInputMode = Literal["baseline", "learnable_weight", "layer_norm"]
ENCODER_INPUT_MODES = ("baseline", "learnable_weight", "layer_norm")


def _split_floats(value: Any) -> Any:
    if isinstance(value, str):
        if value.strip().lower() in ("", "none"):
            return None
        return [float(part) for part in value.split(",") if part.strip()]
    return value


class TaskConfig(BaseModel):
    """Synthetic multi-speaker text-to-frames task."""

    model_config = ConfigDict(extra="forbid")

    vocab_size: int = Field(20, ge=2, description="Number of phoneme token ids")
    num_speakers: int = Field(8, ge=1, description="Number of speakers")
    frame_dim: int = Field(16, ge=1, description="Dimension of one target frame")
    min_tokens: int = Field(5, ge=1, description="Shortest phoneme sequence")
    max_tokens: int = Field(20, ge=1, description="Longest phoneme sequence")
    min_duration: int = Field(2, ge=1, description="Shortest base duration per token (frames)")
    max_duration: int = Field(6, ge=1, description="Longest base duration per token (frames)")
    min_speed: float = Field(0.7, gt=0, description="Lower bound of speaker speed factors")
    max_speed: float = Field(1.3, gt=0, description="Upper bound of speaker speed factors")
    speaker_speeds: Optional[List[float]] = Field(
        None, description="Explicit per-speaker speed factors (overrides sampling)"
    )
    min_noise_sigma: float = Field(0.05, ge=0, description="Lower bound of speaker noise sigma")
    max_noise_sigma: float = Field(0.3, ge=0, description="Upper bound of speaker noise sigma")
    blend: float = Field(0.3, ge=0, lt=1, description="Share of the previous frame blended in")
    speaker_offset_scale: float = Field(0.5, ge=0, description="Scale of per-speaker frame offset")
    train_size: int = Field(2000, ge=1)
    valid_size: int = Field(100, ge=1)
    test_size: int = Field(100, ge=1)
    seed: int = Field(1234, ge=0, description="Master seed for the whole dataset")

    @field_validator("speaker_speeds", mode="before")
    @classmethod
    def split_speeds(cls, value: Any) -> Any:
        return _split_floats(value)

    @model_validator(mode="after")
    def _check_ranges(self) -> "TaskConfig":
        for low, high in (
            ("min_tokens", "max_tokens"),
            ("min_duration", "max_duration"),
            ("min_speed", "max_speed"),
            ("min_noise_sigma", "max_noise_sigma"),
        ):
            if getattr(self, low) > getattr(self, high):
                raise ValueError(f"{low} must not exceed {high}")
        if self.speaker_speeds is not None:
            if len(self.speaker_speeds) != self.num_speakers:
                raise ValueError("speaker_speeds needs one factor per speaker")
            if any(speed <= 0 for speed in self.speaker_speeds):
                raise ValueError("speaker speed factors must be positive")
        if self.train_size < self.num_speakers:
            raise ValueError("train_size must cover every speaker at least once")
        return self


class ModelConfig(BaseModel):
    """Encoder-decoder acoustic model. Defaults are the desk-scale configuration."""

    model_config = ConfigDict(extra="forbid")

    num_layers: int = Field(2, ge=1, description="Blocks per stack")
    hidden_size: int = Field(32, ge=2)
    num_heads: int = Field(2, ge=1)
    ffn_filter_size: int = Field(128, ge=1)
    ffn_kernel_size: int = Field(3, ge=1)
    prenet_bottleneck_size: int = Field(4, ge=1)
    prenet_wide_size: Optional[int] = Field(
        None, ge=1, description="Pre-net width without the bottleneck (none = hidden_size)"
    )
    prenet_bottleneck_enabled: bool = True
    prenet_dropout_rate: float = Field(0.5, ge=0, lt=1)
    prenet_dropout_at_inference: bool = True
    frame_dim: int = Field(16, ge=1)
    vocab_size: int = Field(20, ge=1)
    num_speakers: int = Field(8, ge=1)
    speaker_dim: int = Field(16, ge=1)
    encoder_input_mode: EncoderInputMode = "layer_norm"
    phoneme_scale_spread: float = Field(
        5.0, ge=1, description="Per-token phoneme embedding scales are log-uniform in [1/s, s] (1 = equal scales)"
    )
    dropout_rate: float = Field(0.1, ge=0, lt=1)
    layer_norm_eps: float = Field(1e-5, gt=0)
    max_text_len: int = Field(64, ge=1)
    max_frames: int = Field(512, ge=1)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")
        if self.hidden_size % 2:
            raise ValueError("hidden_size must be even for sinusoidal positions")
        if self.prenet_bottleneck_enabled and self.prenet_bottleneck_size >= self.frame_dim:
            raise ValueError("prenet_bottleneck_size must be smaller than frame_dim")
        return self

    @property
    def prenet_widths(self) -> List[int]:
        """Layer widths of the decoder pre-net, input to output."""
        if self.prenet_bottleneck_enabled:
            inner = self.prenet_bottleneck_size
        else:
            inner = self.prenet_wide_size or self.hidden_size
        return [self.frame_dim, inner, inner, self.hidden_size]


class TrainConfig(BaseModel):
    """One training run: model, task reference, losses, schedule and ablation flags."""

    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = Field(default_factory=ModelConfig)
    task: TaskConfig = Field(default_factory=TaskConfig)

    dc_weight: float = Field(0.1, ge=0, description="lambda of the diagonal constraint loss")
    bandwidth: Optional[int] = Field(None, ge=0, description="b in speech frames (none = auto)")
    dc_layer_weights: Optional[List[float]] = Field(
        None, description="Relative L_DC weight per decoder layer (none = equal)"
    )
    batch_frames: int = Field(400, ge=1, description="Frame budget per batch")
    total_steps: int = Field(2000, ge=1)
    warmup_steps: int = Field(400, ge=1)
    lr_scale: float = Field(0.5, gt=0, description="Multiplier on the inverse-sqrt schedule")
    adam_beta1: float = Field(0.9, ge=0, lt=1)
    adam_beta2: float = Field(0.98, ge=0, lt=1)
    adam_epsilon: float = Field(1e-9, gt=0)
    grad_clip_norm: float = Field(1.0, ge=0, description="Global gradient norm cap (0 = off)")
    seed: int = Field(0, ge=0)
    use_dc: bool = Field(True, description="Diagonal constraint in training and inference")
    use_ln: bool = Field(True, description="Layer-normalised encoder input")
    use_pb: bool = Field(True, description="Pre-net bottleneck")
    mel_loss: Literal["l1", "l2"] = "l1"
    stop_pos_weight: float = Field(5.0, gt=0)
    stop_threshold: float = Field(0.5, gt=0, lt=1)
    max_len_ratio: float = Field(10.0, gt=0, description="Inference frame cap per text token")
    eval_every: int = Field(200, ge=1)
    valid_samples: int = Field(32, ge=1)
    log_every: int = Field(50, ge=1)
    checkpoint_path: Optional[Path] = None
    log_path: Optional[Path] = None

    @field_validator("dc_layer_weights", mode="before")
    @classmethod
    def split_layer_weights(cls, value: Any) -> Any:
        return _split_floats(value)

    @model_validator(mode="after")
    def _check_agreement(self) -> "TrainConfig":
        for name in ("vocab_size", "num_speakers", "frame_dim"):
            if getattr(self.model, name) != getattr(self.task, name):
                raise ValueError(f"model.{name} and task.{name} disagree")
        if self.dc_layer_weights is not None:
            if len(self.dc_layer_weights) != self.model.num_layers:
                raise ValueError("dc_layer_weights needs one weight per decoder layer")
            if any(weight < 0 for weight in self.dc_layer_weights) or sum(self.dc_layer_weights) <= 0:
                raise ValueError("dc_layer_weights must be non-negative with a positive sum")
        return self

    @property
    def effective_dc_weight(self) -> float:
        return self.dc_weight if self.use_dc else 0.0

    @property
    def window_at_inference(self) -> bool:
        return self.use_dc

    def effective_model_config(self) -> ModelConfig:
        """Model config after applying the LN and PB ablation flags."""
        update: Dict[str, Any] = {}
        if not self.use_ln:
            update["encoder_input_mode"] = "baseline"
        if not self.use_pb:
            update["prenet_bottleneck_enabled"] = False
        return self.model.model_copy(update=update)

    @classmethod
    def desk(cls, **overrides: Any) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def full_scale(cls, **overrides: Any) -> "TrainConfig":
        """Model and schedule values of the full-scale configuration."""
        model = ModelConfig(
            num_layers=4,
            hidden_size=256,
            num_heads=2,
            ffn_filter_size=1024,
            ffn_kernel_size=9,
            prenet_bottleneck_size=32,
            frame_dim=80,
            speaker_dim=64,
            phoneme_scale_spread=1.0,
            max_frames=2048,
        )
        task = TaskConfig(frame_dim=80)
        values: Dict[str, Any] = dict(
            model=model, task=task, dc_weight=0.01, bandwidth=50, warmup_steps=4000, lr_scale=1.0
        )
        values.update(overrides)
        return cls(**values)


# ===== FLAT FILE FORMAT =====

_SECTIONS = ("task", "model", "train")
_NESTED = ("model", "task")


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(item) for item in value)
    return str(value)


def _raw_value(text: str) -> Optional[str]:
    return None if text.lower() == "none" else text


def parse_config_text(text: str, source: str = "<config>") -> TrainConfig:
    """Parse the flat three-section format into a validated TrainConfig."""
    sections: Dict[str, Dict[str, Optional[str]]] = {name: {} for name in _SECTIONS}
    current: Optional[str] = None

    for number, raw_line in enumerate(text.splitlines(), 1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            if current not in sections:
                raise ConfigurationError(f"{source}:{number}: unknown section [{current}]")
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{number}: expected key = value, got {raw_line!r}")
        if current is None:
            raise ConfigurationError(f"{source}:{number}: key outside of a section")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigurationError(f"{source}:{number}: empty key")
        if key in _NESTED or key in sections[current]:
            raise ConfigurationError(f"{source}:{number}: duplicate or reserved key {key!r}")
        sections[current][key] = _raw_value(value)

    try:
        task = TaskConfig(**sections["task"])
        model = ModelConfig(**sections["model"])
        return TrainConfig(model=model, task=task, **sections["train"])
    except ValidationError as exc:
        raise ConfigurationError(f"{source}: invalid configuration\n{exc}") from exc


def dump_config(config: TrainConfig) -> str:
    """Serialize every field; parse_config_text(dump_config(c)) == c."""
    lines: List[str] = []
    records = {"task": config.task, "model": config.model, "train": config}
    for section in _SECTIONS:
        record = records[section]
        lines.append(f"[{section}]")
        for name in type(record).model_fields:
            if section == "train" and name in _NESTED:
                continue
            lines.append(f"{name} = {_format_value(getattr(record, name))}")
        lines.append("")
    return "\n".join(lines)


def load_config(path: Path) -> TrainConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def save_config(config: TrainConfig, path: Path) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")
