"""
CAAC Lab Process Settings
Environment-based settings using Pydantic

Experiment parameters live in the run configuration document
(app/schemas/config_schemas.py); this module only holds process-level knobs.
"""

from typing import Literal

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """
    Process settings with environment variable support.

    Every field can be overridden with a ``CAAC_`` prefixed variable,
    e.g. ``CAAC_LOG_FORMAT=console``.
    """

    model_config = SettingsConfigDict(
        env_prefix="CAAC_",
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )

    # Logging Configuration
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: Literal["json", "console"] = "json"

    # Execution
    WORKERS: int = 4  # seed-suite fan-out width

    @field_validator("LOG_LEVEL", mode="before")
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        level = str(v).upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"unknown log level {v!r}")
        return level

    @field_validator("WORKERS")
    @classmethod
    def positive_workers(cls, v: int) -> int:
        if v < 1:
            raise ValueError("WORKERS must be >= 1")
        return v


# Create global settings instance
settings = Settings()
