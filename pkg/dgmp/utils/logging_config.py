import copy
from logging.config import dictConfig
from typing import Any

from dgmp.utils.settings import settings

LOGGING_CONFIG: dict[str, Any] = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "default": {
            "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        },
        "verbose": {
            "format": "%(levelname)s %(asctime)s %(module)s %(message)s",
        },
    },
    "handlers": {
        "console": {
            "level": "INFO",
            "class": "logging.StreamHandler",
            "formatter": "default",
            "stream": "ext://sys.stderr",
        },
    },
    "loggers": {
        "dgmp": {
            "handlers": ["console"],
            "level": "INFO",
            "propagate": False,
        },
    },
}


def build_logging_config(
    level: str | None = None,
    log_file: str | None = None,
) -> dict[str, Any]:
    """
    Build a dictConfig mapping for the `dgmp` logger.

    Args:
        level (str | None): Logger level; defaults to ``settings.LOG_LEVEL``.
        log_file (str | None): Optional path of a DEBUG file handler; defaults to
            ``settings.LOG_FILE``.

    Returns:
        dict[str, Any]: A fresh copy of ``LOGGING_CONFIG`` with the overrides applied.
    """
    config = copy.deepcopy(LOGGING_CONFIG)
    level = (level or settings.LOG_LEVEL).upper()
    log_file = log_file or settings.LOG_FILE

    config["loggers"]["dgmp"]["level"] = level
    config["handlers"]["console"]["level"] = level
    if log_file:
        config["handlers"]["file"] = {
            "level": "DEBUG",
            "class": "logging.FileHandler",
            "filename": log_file,
            "formatter": "verbose",
        }
        config["loggers"]["dgmp"]["handlers"].append("file")
    return config


def setup_logging(level: str | None = None, log_file: str | None = None) -> None:
    """Setup logging configuration."""
    dictConfig(build_logging_config(level, log_file))
