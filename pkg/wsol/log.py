"""Structured logging setup (loguru)."""

import sys
from typing import Any

from loguru import logger

from .config import LogLevel


def configure_logging(level: LogLevel = LogLevel.INFO, json: bool = False) -> None:
    """Install the single stderr sink used by every command."""
    logger.configure(
        handlers=[
            {
                "sink": sys.stderr,
                "format": "{time:YYYY-MM-DD HH:mm:ss} | {level} | {message}",
                "serialize": json,
                "level": LogLevel(level).value,
            }
        ]
    )


def log_event(level: str, message: str, **kwargs: Any) -> None:
    """Log structured events with keyword context."""
    log_data = {"service": "wsol", **kwargs}
    context = " ".join(f"{k}={v}" for k, v in kwargs.items())
    text = f"{message} {context}" if context else message
    logger.bind(**log_data).log(level.upper(), text)
