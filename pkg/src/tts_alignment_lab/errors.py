"""Exception kinds raised across the lab."""


class LabError(Exception):
    """Base class for every error raised by tts_alignment_lab."""


class ShapeError(LabError, ValueError):
    """Tensor or matrix dimensions do not agree."""


class ParameterError(LabError, ValueError):
    """An argument is outside its documented domain."""


class NumericError(LabError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class ConfigurationError(LabError, ValueError):
    """A configuration file or record is invalid or incomplete."""


class CheckpointError(LabError, OSError):
    """A checkpoint or dataset file cannot be read or does not match the config."""


class GraphError(LabError, RuntimeError):
    """The autodiff tape was used in a way it does not support."""


class TrainingDivergedError(LabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step
        self.reason = reason
