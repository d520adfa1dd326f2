import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Optional

DEFAULT_LOG_FILE = "logs/crowd_gauge.log"


def setup_logger(name: str = "crowd_gauge", log_file: Optional[str] = None, level: int = logging.INFO):
    """
    Sets up a logger with console and file handlers.
    The file path defaults to $CROWD_GAUGE_LOG, then logs/crowd_gauge.log.
    An empty CROWD_GAUGE_LOG disables the file handler.
    """
    if log_file is None:
        log_file = os.environ.get("CROWD_GAUGE_LOG", DEFAULT_LOG_FILE)

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Prevent adding handlers multiple times
    if logger.hasHandlers():
        return logger

    formatter = logging.Formatter(
        '[%(asctime)s] [%(levelname)s] %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S'
    )

    if log_file:
        log_dir = os.path.dirname(log_file)
        if log_dir and not os.path.exists(log_dir):
            os.makedirs(log_dir, exist_ok=True)

        file_handler = RotatingFileHandler(
            log_file, maxBytes=10*1024*1024, backupCount=5, encoding='utf-8'
        )
        file_handler.setFormatter(formatter)
        logger.addHandler(file_handler)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


def set_level(level_name: str, name: str = "crowd_gauge") -> None:
    """Resets the level of an already configured logger (e.g. from config.yaml)."""
    level = logging.getLevelName(str(level_name).upper())
    if not isinstance(level, int):
        raise ValueError(f"Unknown log level: {level_name}")
    logging.getLogger(name).setLevel(level)
