"""Process-level settings read from the environment (and ``.env``)."""

import logging
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# regtext/settings.py -> regtext -> root
PROJECT_ROOT = Path(__file__).resolve().parent.parent

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


class RegTextSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="REGTEXT_", env_file=".env", extra="ignore")

    data_dir: Path = Field(default=PROJECT_ROOT / "data", description="Root for relative dataset/embedding paths")
    log_level: str = "INFO"
    jobs: int = Field(default=1, ge=1)


def load_environment(env_file: Optional[Path] = None) -> RegTextSettings:
    """Load ``.env`` (project root by default) and return validated settings."""
    load_dotenv(env_file or PROJECT_ROOT / ".env")
    return RegTextSettings()


def configure_logging(settings: RegTextSettings) -> None:
    logging.basicConfig(level=getattr(logging, settings.log_level.upper(), logging.INFO), format=LOG_FORMAT)


def resolve_data_path(path: Path, settings: RegTextSettings) -> Path:
    path = Path(path).expanduser()
    return path if path.is_absolute() else settings.data_dir / path
