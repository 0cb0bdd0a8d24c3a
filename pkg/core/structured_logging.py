"""
Structured logging infrastructure for kiln.

Provides JSON logging with:
- Multiple log levels (DEBUG, INFO, WARNING, ERROR, CRITICAL)
- Rotating file handlers (daily rotation, 30-day retention)
- Separate error log file
- Timing helpers (Timer, @timed)
- Domain context fields (dataset, iteration, channel, ...)

Usage:
    from core.structured_logging import get_logger

    logger = get_logger(__name__)
    logger.info("Container written", extra={"event": "container_written", "path": "x.bfdc"})
"""

import json
import logging
import sys
import time
import traceback
from datetime import datetime, timezone
from functools import wraps
from logging.handlers import TimedRotatingFileHandler
from pathlib import Path
from typing import Any, Callable, Dict, Optional


ROOT_LOGGER_NAME = "kiln"

# Extra fields copied from LogRecord attributes into the JSON payload.
EXTRA_FIELDS = [
    "event",
    # Data
    "dataset", "source", "split", "path", "num_examples", "backend",
    # Training
    "iteration", "epoch", "channel", "value", "extension", "trigger",
    # Transport
    "host", "port", "frame_type",
    # Errors and retries
    "error_type", "stack_trace", "attempt", "max_attempts", "delay_seconds",
    "operation",
    # Timing
    "elapsed_ms",
]


# =============================================================================
# Formatters
# =============================================================================

class JSONFormatter(logging.Formatter):
    """
    Formats log records as one JSON object per line.

    Output format:
    {
        "timestamp": "2026-10-19T10:30:00.123456Z",
        "level": "INFO",
        "logger": "kiln.core.mainloop",
        "message": "Snapshot written",
        "event": "snapshot_written",
        "iteration": 40,
        ...
    }
    """

    def format(self, record: logging.LogRecord) -> str:
        log_data: Dict[str, Any] = {
            "timestamp": datetime.now(timezone.utc).isoformat().replace("+00:00", "Z"),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
        }

        for name in EXTRA_FIELDS:
            value = getattr(record, name, None)
            if value is not None:
                log_data[name] = value

        if record.exc_info:
            log_data["error_type"] = record.exc_info[0].__name__ if record.exc_info[0] else None
            log_data["stack_trace"] = self.formatException(record.exc_info)

        return json.dumps(log_data, default=str)


class ConsoleFormatter(logging.Formatter):
    """
    Human-readable formatter for console output.

    Output format:
    2026-10-19 10:30:00 | INFO     | kiln.core.mainloop | Snapshot written | event=snapshot_written, iteration=40
    """

    COLORS = {
        "DEBUG": "\033[36m",
        "INFO": "\033[32m",
        "WARNING": "\033[33m",
        "ERROR": "\033[31m",
        "CRITICAL": "\033[35m",
        "RESET": "\033[0m",
    }

    def __init__(self, use_color: bool = True):
        super().__init__()
        self.use_color = use_color

    def format(self, record: logging.LogRecord) -> str:
        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        level = record.levelname

        if self.use_color:
            color = self.COLORS.get(level, "")
            reset = self.COLORS["RESET"]
        else:
            color = reset = ""

        msg = f"{timestamp} | {color}{level:8}{reset} | {record.name} | {record.getMessage()}"

        context_parts = []
        for name in ("event", "iteration", "epoch", "path", "elapsed_ms"):
            value = getattr(record, name, None)
            if value is not None:
                context_parts.append(f"{name}={value}")
        if context_parts:
            msg += f" | {', '.join(context_parts)}"

        if record.exc_info:
            msg += f"\n{self.formatException(record.exc_info)}"

        return msg


# =============================================================================
# Logger Setup
# =============================================================================

_loggers: Dict[str, logging.Logger] = {}
_initialized = False


def setup_logging(
    log_dir: str = "logs",
    console_level: int = logging.INFO,
    file_level: int = logging.DEBUG,
    enable_console: bool = True,
    enable_file: bool = False,
    enable_error_log: bool = False,
    force: bool = False,
) -> None:
    """
    Initialize the logging system.

    Creates (when enabled):
    - logs/kiln.log (all logs as JSON, rotating daily, 30-day retention)
    - logs/errors.log (ERROR and above, rotating daily, 30-day retention)
    - Console output on stderr (stdout is reserved for command output)

    Args:
        log_dir: Directory for log files
        console_level: Minimum level for console output
        file_level: Minimum level for file output
        enable_console: Whether to output to the console
        enable_file: Whether to write kiln.log
        enable_error_log: Whether to write errors.log
        force: Re-initialize even if already set up
    """
    global _initialized
    if _initialized and not force:
        return

    root_logger = logging.getLogger(ROOT_LOGGER_NAME)
    root_logger.setLevel(logging.DEBUG)
    root_logger.propagate = False

    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    if enable_console:
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setLevel(console_level)
        console_handler.setFormatter(ConsoleFormatter(use_color=sys.stderr.isatty()))
        root_logger.addHandler(console_handler)

    if enable_file or enable_error_log:
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)

        if enable_file:
            file_handler = TimedRotatingFileHandler(
                filename=str(log_path / "kiln.log"),
                when="midnight",
                interval=1,
                backupCount=30,
                encoding="utf-8",
            )
            file_handler.setLevel(file_level)
            file_handler.setFormatter(JSONFormatter())
            file_handler.suffix = "%Y-%m-%d"
            root_logger.addHandler(file_handler)

        if enable_error_log:
            error_handler = TimedRotatingFileHandler(
                filename=str(log_path / "errors.log"),
                when="midnight",
                interval=1,
                backupCount=30,
                encoding="utf-8",
            )
            error_handler.setLevel(logging.ERROR)
            error_handler.setFormatter(JSONFormatter())
            error_handler.suffix = "%Y-%m-%d"
            root_logger.addHandler(error_handler)

    _initialized = True


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance for a module.

    Args:
        name: Module name (usually __name__)

    Returns:
        Logger under the kiln namespace

    Example:
        logger = get_logger(__name__)
        logger.info("Epoch finished", extra={"event": "epoch_end", "epoch": 3})
    """
    if name == ROOT_LOGGER_NAME or name.startswith(ROOT_LOGGER_NAME + "."):
        logger_name = name
    else:
        logger_name = f"{ROOT_LOGGER_NAME}.{name}"

    if logger_name not in _loggers:
        _loggers[logger_name] = logging.getLogger(logger_name)

    return _loggers[logger_name]


# =============================================================================
# Convenience Functions
# =============================================================================

def log_error(
    error: Exception,
    context: Optional[str] = None,
    logger_name: str = "error",
    **extra,
) -> None:
    """
    Log an error with its type and stack trace.

    Args:
        error: The exception
        context: What was happening when it occurred
        logger_name: Logger to use
        **extra: Additional structured fields
    """
    logger = get_logger(logger_name)
    message = f"Error: {type(error).__name__}: {error}"
    if context:
        message = f"{context}: {message}"
    logger.error(
        message,
        extra={
            "event": "error",
            "error_type": type(error).__name__,
            "stack_trace": "".join(traceback.format_exception(type(error), error, error.__traceback__)),
            **extra,
        },
    )


# =============================================================================
# Timing
# =============================================================================

def timed(event_name: str, logger_name: str = "performance"):
    """
    Decorator to time function execution and log it at DEBUG.

    Usage:
        @timed("dataset_conversion")
        def convert(...):
            ...

    Args:
        event_name: Name of the event for logging
        logger_name: Logger to use
    """
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                elapsed_ms = (time.perf_counter() - start) * 1000
                get_logger(logger_name).error(
                    f"{event_name} failed after {elapsed_ms:.2f}ms",
                    extra={
                        "event": f"{event_name}_error",
                        "elapsed_ms": round(elapsed_ms, 2),
                        "error_type": type(e).__name__,
                    },
                )
                raise
            elapsed_ms = (time.perf_counter() - start) * 1000
            get_logger(logger_name).debug(
                f"{event_name} completed",
                extra={
                    "event": f"{event_name}_timing",
                    "elapsed_ms": round(elapsed_ms, 2),
                },
            )
            return result
        return wrapper
    return decorator


class Timer:
    """
    Context manager for timing code blocks.

    Usage:
        with Timer() as t:
            # ... do work ...
        logger.info("done", extra={"elapsed_ms": t.elapsed_ms})
    """

    def __init__(self):
        self.start_time: Optional[float] = None
        self.end_time: Optional[float] = None
        self.elapsed_ms = 0.0

    def __enter__(self) -> "Timer":
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, *args) -> None:
        self.end_time = time.perf_counter()
        self.elapsed_ms = round((self.end_time - self.start_time) * 1000, 2)
