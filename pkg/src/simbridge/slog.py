"""Structured logging: ``ts level component event k=v ...`` lines."""

from __future__ import annotations

import logging
import time

_FORMAT = "%(asctime)s %(levelname)s %(name)s %(message)s"
_DATEFMT = "%Y-%m-%dT%H:%M:%S"

_LEVELS = {
    "debug": logging.DEBUG,
    "info": logging.INFO,
    "warning": logging.WARNING,
    "error": logging.ERROR,
    "critical": logging.CRITICAL,
}


class _UtcFormatter(logging.Formatter):
    converter = time.gmtime

    def formatTime(self, record, datefmt=None):
        base = super().formatTime(record, datefmt or _DATEFMT)
        return f"{base}.{int(record.msecs):03d}Z"


def configure_logging(level: str = "info") -> None:
    handler = logging.StreamHandler()
    handler.setFormatter(_UtcFormatter(_FORMAT))
    root = logging.getLogger("simbridge")
    root.handlers[:] = [handler]
    root.setLevel(_LEVELS.get(level, logging.INFO))
    root.propagate = False


def component_logger(component: str) -> logging.Logger:
    return logging.getLogger(f"simbridge.{component}")


def fmt_event(event: str, **fields) -> str:
    if not fields:
        return event
    parts = " ".join(f"{k}={v}" for k, v in fields.items())
    return f"{event} {parts}"
