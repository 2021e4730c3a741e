import logging
import logging.handlers
import os
from datetime import datetime
from typing import Optional

CONSOLE_FORMAT = "%(levelname)s: %(message)s"
FILE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_FILE_BYTES = 10 * 1024 * 1024


def setup_logging(log_level: str = "INFO", log_dir: Optional[str] = None) -> None:
    """
    Route every ``src.*`` logger to stderr at ``log_level``; with ``log_dir`` also keep a daily
    nearid_YYYYMMDD.log (rotated at 10MB, 5 backups). Stdout stays free for command summaries.
    """
    level = logging.getLevelName(log_level.upper())
    root = logging.getLogger()
    root.setLevel(level)
    root.handlers.clear()

    console = logging.StreamHandler()
    console.setFormatter(logging.Formatter(CONSOLE_FORMAT))
    root.addHandler(console)

    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        path = os.path.join(log_dir, f"nearid_{datetime.now():%Y%m%d}.log")
        file_handler = logging.handlers.RotatingFileHandler(path, maxBytes=LOG_FILE_BYTES, backupCount=5)
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))
        root.addHandler(file_handler)

    # faiss reports its SIMD loader at INFO on first import
    logging.getLogger("faiss").setLevel(logging.WARNING)
