"""Defines a singleton logger object used by relstack."""

from __future__ import annotations
from typing import Optional
import logging
import sys

CONSOLE_FORMAT = "[%(levelname)s] %(message)s"


class _ConsoleHandler(logging.StreamHandler):
    """Writes to whatever sys.stdout / sys.stderr is when a record is emitted"""

    def __init__(self, to_stdout: bool) -> None:
        super().__init__()
        self.to_stdout = to_stdout

    @property
    def stream(self):
        return sys.stdout if self.to_stdout else sys.stderr

    @stream.setter
    def stream(self, value) -> None:
        pass


class RelstackLogger(logging.Logger):
    """Custom logger. Key=relstack"""

    _instance: Optional[RelstackLogger] = None
    _init_flag = False

    def __new__(cls, *args, **kwargs):
        """Prevents duplicate instances of this object"""
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self) -> None:
        if RelstackLogger._init_flag:
            return

        super().__init__("relstack", logging.DEBUG)
        self.console: Optional[logging.Handler] = None
        RelstackLogger._init_flag = True

    def log_to_console(self, level: int = logging.WARNING, to_stdout: bool = False) -> logging.Handler:
        """Attaches the console handler, replacing the one a previous call attached"""
        if self.console is not None:
            self.removeHandler(self.console)
        handler = _ConsoleHandler(to_stdout)
        handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))
        handler.setLevel(level)
        self.addHandler(handler)
        self.console = handler
        return handler
