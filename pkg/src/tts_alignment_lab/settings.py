"""Process-level settings read from the environment (and an optional .env file)."""

from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict


class LabSettings(BaseSettings):
    """Environment knobs that are not part of an experiment's config.

    ATLAB_THREADS    parallel ablation arms (1 keeps wall-clock logs deterministic)
    ATLAB_LOG_LEVEL  root logger level for the CLI
    ATLAB_PROGRESS   show tqdm progress bars
    """

    model_config = SettingsConfigDict(env_prefix="ATLAB_", env_file=".env", extra="ignore")

    threads: int = Field(1, ge=1, description="Maximum ablation arms run in parallel")
    log_level: str = Field("INFO", description="Logging level name")
    progress: bool = Field(True, description="Whether to draw progress bars")


def get_settings() -> LabSettings:
    """Read settings fresh so tests can monkeypatch the environment."""
    return LabSettings()
