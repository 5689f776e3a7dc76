"""Package logger and warning accumulation."""

from __future__ import annotations

import logging

from clothloop.util.enum.warning_types import WarningTypes


class RunWarning:
    """Warning wrapper class for run anomalies."""

    def __init__(self, message: str, warning_type: WarningTypes) -> None:
        """Initialize the Warning.

        Args:
            message (str): The warning message.
            warning_type (WarningTypes): The type of the warning.
        """
        self.message = message
        self.warning_type = warning_type

    def __repr__(self) -> str:
        """Short representation for test failure output."""
        return f"RunWarning({self.warning_type.name}, {self.message!r})"


class WarningAccumulator(logging.Handler):
    """Logging handler to accumulate warnings while still printing them."""

    def __init__(self) -> None:
        """Initialize the WarningAccumulator."""
        super().__init__()
        self.warnings: list[RunWarning] = []

    def emit(self, record: logging.LogRecord) -> None:
        """Print and accumulate warning messages."""
        rendered = self.format(record)
        if record.levelno == logging.WARNING:
            tag = rendered.split(":")[0]
            if tag in WarningTypes.__members__:
                self.warnings.append(RunWarning(rendered, WarningTypes[tag]))
        if record.levelno >= logging.INFO:
            print(rendered)  # noqa: T201

    def clear_warnings(self) -> None:
        """Clear the accumulated warnings."""
        self.warnings.clear()


logger = logging.getLogger("clothloop")
accumulator = WarningAccumulator()
logger.addHandler(accumulator)
logger.setLevel(logging.DEBUG)
logger.propagate = False


def get_warnings() -> list[RunWarning]:
    """Return the warnings accumulated since the last clear."""
    return list(accumulator.warnings)


def clear_warnings() -> None:
    """Forget accumulated warnings (start of a command or test)."""
    accumulator.clear_warnings()
