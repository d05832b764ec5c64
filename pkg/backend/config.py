"""
Process configuration using Pydantic Settings.

Scenario parameters live in the scenario JSON file (see
backend.schemas.scenario); this module only holds what belongs to the
process: logging, output locations and worker counts.
"""

import logging
import sys
from functools import lru_cache
from typing import Optional

from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Settings loaded from POLYMAP_* environment variables and .env."""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="POLYMAP_",
        case_sensitive=True,
        extra="ignore",
    )

    APP_NAME: str = "polymap"
    APP_VERSION: str = "1.0.0"

    # Logging Configuration
    LOG_LEVEL: str = "INFO"
    LOG_FILE: Optional[str] = None
    LOG_FORMAT: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Output
    OUTPUT_DIR: str = "runs/"

    # Perception worker pool used by `bench` (order of results is preserved)
    PERCEPTION_WORKERS: int = 1



@lru_cache()
def get_settings() -> Settings:
    """
    Get cached settings instance.

    Uses lru_cache to ensure settings are loaded only once.
    """
    return Settings()


def configure_logging(settings: Optional[Settings] = None, level: Optional[str] = None) -> None:
    """
    Configure the root logger once for CLI use.

    Args:
        settings: Settings to read level/format/file from (default: cached settings)
        level: Optional override of settings.LOG_LEVEL
    """
    settings = settings or get_settings()
    handlers = [logging.StreamHandler(sys.stderr)]
    if settings.LOG_FILE:
        handlers.append(logging.FileHandler(settings.LOG_FILE))

    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format=settings.LOG_FORMAT,
        handlers=handlers,
        force=True,
    )
