"""
Run configuration loading.

Config files are plain `key=value` lines (dotenv syntax). Values resolve
with the precedence: command-line flag > config file > `SKINFCN_*`
environment variable > schema default.
"""

import logging
import os
from pathlib import Path
from typing import Any, Mapping

from dotenv import dotenv_values
from pydantic import ValidationError

from skinfcn.errors import ConfigError
from skinfcn.schemas.training import RunConfig

_LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

_ENV_KEYS = {"threads": "SKINFCN_THREADS"}


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a `key=value` file; keys must be RunConfig fields."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {key.strip().lower().replace("-", "_"): value for key, value in dotenv_values(path).items()}
    unknown = sorted(set(values) - set(RunConfig.model_fields))
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {', '.join(unknown)}")
    empty = sorted(key for key, value in values.items() if value is None or value == "")
    if empty:
        raise ConfigError(f"keys without a value in {path}: {', '.join(empty)}")
    return values


def env_overrides() -> dict[str, str]:
    return {key: os.environ[var] for key, var in _ENV_KEYS.items() if os.environ.get(var)}


def resolve_run_config(flags: Mapping[str, Any], config_path: str | Path | None = None) -> RunConfig:
    """Merge defaults, environment, config file and flags into a validated RunConfig.

    Flags whose value is None are treated as "not given".
    """
    merged: dict[str, Any] = dict(env_overrides())
    if config_path is not None:
        merged.update(read_config_file(config_path))
        _LOGGER.debug(f"Loaded run configuration from {config_path}")
    merged.update({key: value for key, value in flags.items() if value is not None})
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(f"invalid run configuration: {e}") from e


def configure_logging(level: str | None = None) -> None:
    level = (level or os.getenv("SKINFCN_LOG_LEVEL", "INFO")).upper()
    if level not in logging.getLevelNamesMapping():
        raise ConfigError(f"unknown log level '{level}'")
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
