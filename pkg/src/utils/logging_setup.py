"""
Logging configuration for command-line runs
"""

import logging
import os
from typing import Optional

from rich.console import Console
from rich.logging import RichHandler

FILE_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


def setup_logging(level: int = logging.INFO, log_file: Optional[str] = None,
                  console: Optional[Console] = None) -> logging.Logger:
    """Configure the root logger once per process.

    Parameters
    ----------
    level : int
        Threshold for console and file output.
    log_file : str, optional
        When given, a plain-text copy of the log is appended there.
    console : rich.console.Console, optional
        Console to render to; stderr by default so curve data on stdout stays clean.
    """
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()
    root.setLevel(level)

    rich_handler = RichHandler(console=console or Console(stderr=True), show_path=False, markup=False)
    rich_handler.setLevel(level)
    root.addHandler(rich_handler)

    if log_file:
        directory = os.path.dirname(log_file)
        if directory:
            os.makedirs(directory, exist_ok=True)
        file_handler = logging.FileHandler(log_file)
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        file_handler.setLevel(level)
        root.addHandler(file_handler)

    return root
