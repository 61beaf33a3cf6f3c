"""
Workbench Configuration for the Multi-Exit Lab
Environment variables, worker limits, logging and output settings
"""

import logging
import logging.config
import os
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any

import orjson

from src.core.errors import ConfigError

UTC = timezone.utc  # datetime.UTC requires Python 3.11+


def _level_names_mapping() -> dict[str, int]:
    # logging.getLevelNamesMapping requires Python 3.11+; same result as its body.
    if hasattr(logging, "getLevelNamesMapping"):
        return logging.getLevelNamesMapping()
    return logging._nameToLevel.copy()

LOGGER_NAME = "mx-lab"


@dataclass
class ComputeConfig:
    """Worker pool and seeding"""

    max_threads: int = field(default_factory=lambda: int(os.getenv("MX_THREADS", str(os.cpu_count() or 1))))
    default_seed: int = field(default_factory=lambda: int(os.getenv("MX_DEFAULT_SEED", "0")))


@dataclass
class MonitoringConfig:
    """Logging configuration"""

    log_level: str = field(default_factory=lambda: os.getenv("MX_LOG_LEVEL", "INFO"))
    log_format: str = field(default_factory=lambda: os.getenv("MX_LOG_FORMAT", "standard"))
    log_file: str | None = field(default_factory=lambda: os.getenv("MX_LOG_FILE"))
    standard_format: str = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class OutputConfig:
    """Where reports and checkpoints go"""

    output_dir: str = field(default_factory=lambda: os.getenv("MX_OUTPUT_DIR", "runs"))
    svg_hashsalt: str = field(default_factory=lambda: os.getenv("MX_SVG_HASHSALT", "mx-lab"))


class WorkbenchSettings:
    """Aggregated settings for one CLI invocation"""

    def __init__(self) -> None:
        try:
            self.compute = ComputeConfig()
            self.monitoring = MonitoringConfig()
            self.output = OutputConfig()
        except ValueError as e:
            raise ConfigError(f"invalid environment setting: {e}") from e
        self._validate_configuration()

    def _validate_configuration(self) -> None:
        errors = []
        if self.compute.max_threads < 1:
            errors.append("MX_THREADS must be at least 1")
        if self.monitoring.log_level.upper() not in _level_names_mapping():
            errors.append(f"MX_LOG_LEVEL '{self.monitoring.log_level}' is not a logging level")
        if self.monitoring.log_format not in ("json", "standard"):
            errors.append("MX_LOG_FORMAT must be 'json' or 'standard'")
        if errors:
            raise ConfigError(f"Configuration validation failed: {'; '.join(errors)}")

    def worker_count(self, requested: int | None = None) -> int:
        if requested is None:
            return self.compute.max_threads
        return max(1, min(requested, self.compute.max_threads))

    def get_logging_config(self) -> dict[str, Any]:
        level = self.monitoring.log_level.upper()
        handlers: dict[str, Any] = {
            "console": {
                "class": "logging.StreamHandler",
                "level": level,
                "formatter": self.monitoring.log_format,
                "stream": "ext://sys.stderr",
            }
        }
        if self.monitoring.log_file:
            handlers["file"] = {
                "class": "logging.FileHandler",
                "level": level,
                "formatter": "json",
                "filename": self.monitoring.log_file,
            }
        return {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "standard": {"format": self.monitoring.standard_format},
                "json": {"()": JSONFormatter},
            },
            "handlers": handlers,
            "loggers": {
                LOGGER_NAME: {"handlers": list(handlers), "level": level, "propagate": False},
                "src": {"handlers": list(handlers), "level": level, "propagate": False},
                "infrastructure": {"handlers": list(handlers), "level": level, "propagate": False},
            },
            "root": {"handlers": ["console"], "level": "WARNING"},
        }

    def configure_logging(self) -> None:
        logging.config.dictConfig(self.get_logging_config())


_RESERVED = set(logging.LogRecord("", 0, "", 0, "", None, None).__dict__) | {"message", "asctime"}


class JSONFormatter(logging.Formatter):
    """One JSON object per record; extra fields are carried through"""

    def format(self, record: logging.LogRecord) -> str:
        entry: dict[str, Any] = {
            "timestamp": datetime.now(UTC).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "line": record.lineno,
        }
        if record.exc_info:
            entry["exception"] = self.formatException(record.exc_info)
        for key, value in record.__dict__.items():
            if key not in _RESERVED:
                entry[key] = value
        return orjson.dumps(entry, default=str, option=orjson.OPT_SERIALIZE_NUMPY).decode("utf-8")


class StructuredLogger:
    """Logger whose keyword arguments become structured fields"""

    def __init__(self, name: str = LOGGER_NAME):
        self.name = name
        self.logger = logging.getLogger(name)
        if not self.logger.handlers and not logging.getLogger().handlers:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(JSONFormatter())
            self.logger.addHandler(handler)
            self.logger.setLevel(logging.INFO)

    def debug(self, msg: str, **kwargs: Any) -> None:
        self.logger.debug(msg, extra=kwargs)

    def info(self, msg: str, **kwargs: Any) -> None:
        self.logger.info(msg, extra=kwargs)

    def warning(self, msg: str, **kwargs: Any) -> None:
        self.logger.warning(msg, extra=kwargs)

    def error(self, msg: str, **kwargs: Any) -> None:
        self.logger.error(msg, extra=kwargs)


__all__ = [
    "ComputeConfig",
    "MonitoringConfig",
    "OutputConfig",
    "WorkbenchSettings",
    "JSONFormatter",
    "StructuredLogger",
]
