"""
Base handler and context classes for kiln subcommands.

Every subcommand is a handler: it receives a HandlerContext and returns a
HandlerResult. The CLI prints the result and turns it into the exit code.
"""

import argparse
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List

from config.settings import Settings

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


@dataclass
class HandlerContext:
    """
    Context passed to all subcommand handlers.

    Contains everything a handler needs:
    - The parsed arguments
    - Settings from the environment (data directory, log level, ...)
    - The exact argv, for provenance records

    This avoids passing dozens of parameters to each handler.
    """
    args: argparse.Namespace
    settings: Settings
    argv: List[str] = field(default_factory=list)
    debug_mode: bool = False

    debug_lines: List[str] = field(default_factory=list)

    def add_debug(self, message: str) -> None:
        """Add a debug message."""
        if self.debug_mode:
            self.debug_lines.append(message)


@dataclass
class HandlerResult:
    """
    Result returned by subcommand handlers.

    Attributes:
        output: Text for stdout (may be empty)
        exit_code: 0 success, 1 domain failure
    """
    output: str = ""
    exit_code: int = EXIT_OK


class BaseHandler(ABC):
    """
    Base class for all subcommand handlers.

    Handlers are stateless; domain failures propagate as KilnError and are
    turned into a one-line diagnostic by the CLI.
    """

    command: str = ""

    @abstractmethod
    def handle(self, ctx: HandlerContext) -> HandlerResult:
        """
        Run the subcommand.

        Args:
            ctx: Handler context with arguments and settings

        Returns:
            HandlerResult with the text to print and the exit code
        """
