from typing import Optional

from pydantic import field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class Settings(BaseSettings):
    """Process-level settings read from the environment (prefix NEARID_) or .env."""

    seed: Optional[int] = None  # NEARID_SEED overrides the run config seed
    log_level: str = "INFO"
    logs_path: str = "data/logs"

    model_config = SettingsConfigDict(
        env_prefix="NEARID_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )

    @field_validator("log_level")
    @classmethod
    def _known_level(cls, value: str) -> str:
        if value.upper() not in LOG_LEVELS:
            raise ValueError(f"log_level must be one of {', '.join(LOG_LEVELS)}")
        return value.upper()


def get_settings() -> Settings:
    return Settings()
