"""
LOGGING CONFIGURATION (Hybrid Approach: print() + persistent logs)

Library modules log through named loggers only:
- mlphand.app    → .logs/app.log (CLI invocations, artifacts written)
- mlphand.train  → .logs/train_YYYYMMDD.log (epoch summaries)
- mlphand.errors → .logs/errors.log (warnings and failures)

Until setup_run_logging() is called the loggers stay console-only.
"""

from __future__ import annotations

import logging
import os
from datetime import datetime
from logging.handlers import RotatingFileHandler
from typing import Dict

LOG_DIRNAME = ".logs"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"
MAX_LOG_BYTES = 10 * 1024 * 1024
BACKUP_COUNT = 5

app_logger = logging.getLogger("mlphand.app")
train_logger = logging.getLogger("mlphand.train")
error_logger = logging.getLogger("mlphand.errors")

app_logger.setLevel(logging.INFO)
train_logger.setLevel(logging.INFO)
error_logger.setLevel(logging.WARNING)

_MARKER = "_mlphand_run_handler"


def _attach(logger: logging.Logger, path: str, level: int) -> None:
    for handler in list(logger.handlers):
        if getattr(handler, _MARKER, False):
            logger.removeHandler(handler)
            handler.close()
    handler = RotatingFileHandler(path, maxBytes=MAX_LOG_BYTES, backupCount=BACKUP_COUNT, encoding="utf-8")
    handler.setLevel(level)
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    setattr(handler, _MARKER, True)
    logger.addHandler(handler)


def setup_run_logging(output_dir: str) -> Dict[str, str]:
    """Attach rotating file handlers under <output_dir>/.logs; returns logger → file."""
    log_dir = os.path.join(output_dir, LOG_DIRNAME)
    try:
        os.makedirs(log_dir, exist_ok=True)
    except (PermissionError, OSError) as e:
        print(f"⚠️  Warning: Could not create log directory {log_dir}: {e}")
        return {}

    paths = {
        "mlphand.app": os.path.join(log_dir, "app.log"),
        "mlphand.train": os.path.join(log_dir, f"train_{datetime.now().strftime('%Y%m%d')}.log"),
        "mlphand.errors": os.path.join(log_dir, "errors.log"),
    }
    _attach(app_logger, paths["mlphand.app"], logging.INFO)
    _attach(train_logger, paths["mlphand.train"], logging.INFO)
    _attach(error_logger, paths["mlphand.errors"], logging.WARNING)
    return paths


def close_run_logging() -> None:
    """Detach and close the file handlers added by setup_run_logging."""
    for logger in (app_logger, train_logger, error_logger):
        for handler in list(logger.handlers):
            if getattr(handler, _MARKER, False):
                logger.removeHandler(handler)
                handler.close()
