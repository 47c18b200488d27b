from pathlib import Path

from pydantic_settings import BaseSettings, SettingsConfigDict

VERSION = "0.1.0"


class VolterraSettings(BaseSettings):
    """Runtime settings read from the environment (VOLTERRA_*) or .env"""
    output_dir: Path = Path("results")
    threads: int = 1
    log_level: str = "INFO"
    fit_cache_dir: Path | None = None

    model_config = SettingsConfigDict(env_file=".env", env_prefix="VOLTERRA_", extra="ignore")


settings = VolterraSettings()
