import json
import logging
import os
from logging.handlers import RotatingFileHandler
from pathlib import Path
from threading import Lock
from typing import Any

from dotenv import load_dotenv

LOG_LEVEL_ENV = "SGAN_LOG_LEVEL"


def setup_logging(log_file: str | Path = "logs/sgan.log", level: str | None = None) -> None:
    load_dotenv()
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)
    formatter = logging.Formatter("%(asctime)s | %(levelname)s | %(name)s | %(message)s")

    root = logging.getLogger()
    root.setLevel((level or os.getenv(LOG_LEVEL_ENV, "INFO")).upper())
    root.handlers.clear()

    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)

    file_handler = RotatingFileHandler(log_file, maxBytes=5_000_000, backupCount=5)
    file_handler.setFormatter(formatter)

    root.addHandler(stream_handler)
    root.addHandler(file_handler)


class TrainLog:
    """Append-only JSON-lines record of per-step losses (``train.log`` in a run directory)."""

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = Lock()

    def append(self, record: dict[str, Any]) -> None:
        line = json.dumps(record, sort_keys=True)
        with self._lock, self.path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")

    def read(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        with self.path.open("r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]
