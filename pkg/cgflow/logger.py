"""
Logging configuration for cgflow

Everything logs under the ``cgflow`` logger. Console records go to stderr so
that JSON lines or CSV written to stdout stay machine readable; an optional
file handler always records at DEBUG with the calling function and line.
"""

import logging
import os
import sys
from pathlib import Path
from typing import Optional, Union

ROOT_NAME = "cgflow"
LEVEL_ENV = "CGFLOW_LOG_LEVEL"

_RESET = "\033[0m"
_LEVEL_COLORS = {
    logging.DEBUG: "\033[36m",
    logging.INFO: "\033[32m",
    logging.WARNING: "\033[33m",
    logging.ERROR: "\033[31m",
    logging.CRITICAL: "\033[35m",
}

_PLAIN_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
_FILE_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(funcName)s:%(lineno)d | %(message)s"
_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"


class ColoredFormatter(logging.Formatter):
    """Colours the level name for terminal output"""

    def format(self, record: logging.LogRecord) -> str:
        color = _LEVEL_COLORS.get(record.levelno)
        if color is None:
            return super().format(record)
        # copy: other handlers share the record
        tinted = logging.makeLogRecord(record.__dict__)
        tinted.levelname = f"{color}{record.levelname}{_RESET}"
        return super().format(tinted)


def level_from_env(default: int = logging.WARNING) -> int:
    """Level named (or numbered) by CGFLOW_LOG_LEVEL, else ``default``"""
    raw = os.environ.get(LEVEL_ENV, "").strip()
    if not raw:
        return default
    if raw.isdigit():
        return int(raw)
    level = logging.getLevelName(raw.upper())
    return level if isinstance(level, int) else default


def _console_formatter(colored: bool) -> logging.Formatter:
    if colored and sys.stderr.isatty():
        return ColoredFormatter("%(levelname)s | %(name)s | %(message)s")
    return logging.Formatter(_PLAIN_FORMAT, datefmt=_DATE_FORMAT)


def _is_console(handler: logging.Handler) -> bool:
    return not isinstance(handler, logging.FileHandler)


def setup_logger(
    name: str = ROOT_NAME,
    level: Optional[int] = None,
    log_file: Optional[Union[str, Path]] = None,
    colored: bool = True,
) -> logging.Logger:
    """
    Configure the cgflow logger once; later calls return it unchanged

    Args:
        name: Logger name
        level: Console level (default: CGFLOW_LOG_LEVEL, else WARNING)
        log_file: Optional path for a DEBUG-level log file
        colored: Colour level names when stderr is a terminal

    Returns:
        The configured logger
    """
    configured = logging.getLogger(name)
    if configured.handlers:
        return configured

    level = level_from_env() if level is None else level
    configured.setLevel(level)
    configured.propagate = False

    console = logging.StreamHandler(sys.stderr)
    console.setLevel(level)
    console.setFormatter(_console_formatter(colored))
    configured.addHandler(console)

    if log_file:
        add_file_handler(log_file, configured)
    return configured


def add_file_handler(log_file: Union[str, Path],
                     target: Optional[logging.Logger] = None) -> logging.FileHandler:
    """Mirror every cgflow record, debug included, into ``log_file``"""
    target = target or logger
    path = Path(log_file)
    path.parent.mkdir(parents=True, exist_ok=True)

    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(_FILE_FORMAT, datefmt=_DATE_FORMAT))
    target.addHandler(handler)
    target.setLevel(logging.DEBUG)
    return handler


logger = setup_logger()


def get_logger(name: str) -> logging.Logger:
    """Child logger ``cgflow.<name>``, e.g. ``get_logger("odeint")``"""
    return logging.getLogger(f"{ROOT_NAME}.{name}")


def set_log_level(level: int):
    """Change what the console shows; file handlers keep logging DEBUG"""
    has_file = any(not _is_console(h) for h in logger.handlers)
    logger.setLevel(logging.DEBUG if has_file else level)
    for handler in logger.handlers:
        if _is_console(handler):
            handler.setLevel(level)


def enable_debug_logging():
    set_log_level(logging.DEBUG)


def disable_logging():
    """Silence the console (a log file, if any, still records)"""
    set_log_level(logging.CRITICAL + 1)


__all__ = [
    "ColoredFormatter",
    "setup_logger",
    "add_file_handler",
    "get_logger",
    "logger",
    "level_from_env",
    "set_log_level",
    "enable_debug_logging",
    "disable_logging",
]
