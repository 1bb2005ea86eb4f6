"""
Timestamped logging shared by the engine and the CLI.
"""

import logging
import sys

from config import Config

_FORMAT = "[%(asctime)s] %(levelname)s %(name)s: %(message)s"
_DATEFMT = "%H:%M:%S"
_configured = False


def _configure_root():
    global _configured
    if _configured:
        return
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter(_FORMAT, datefmt=_DATEFMT))
    root = logging.getLogger("gne")
    root.addHandler(handler)
    root.propagate = False
    try:
        root.setLevel(Config.get_log_level())
    except ValueError:
        root.setLevel(logging.INFO)
    _configured = True


def get_logger(name):
    """
    Get a logger under the `gne` namespace.

    Args:
        name (str): Module name, usually `__name__`

    Returns:
        logging.Logger: Logger writing `[HH:MM:SS] LEVEL name: message` lines
    """
    _configure_root()
    if not name.startswith("gne"):
        name = f"gne.{name}"
    return logging.getLogger(name)


def set_level(level):
    _configure_root()
    logging.getLogger("gne").setLevel(level.upper() if isinstance(level, str) else level)


def log_message(message, level="info"):
    """Log a one-off message from the CLI layer."""
    getattr(get_logger("gne.cli"), level.lower())(message)
