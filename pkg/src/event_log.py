import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

# Setup logging configuration
logging.basicConfig(level=logging.INFO, format="%(asctime)s - %(levelname)s - %(message)s")

EVENTS_FILE = "events.jsonl"


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (set, frozenset, tuple)):
        return list(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"{type(value).__name__} is not JSON serializable")


class EventLog:
    """Line-delimited JSON events of one run; every line is one complete object."""

    def __init__(self, run_dir):
        self.path = Path(run_dir) / EVENTS_FILE
        self._fp = open(self.path, "a", encoding="utf-8")

    def emit(self, event: str, **fields):
        record = {"ts": round(time.time(), 6), "event": event, **fields}
        self._fp.write(json.dumps(record, default=_jsonable, sort_keys=True) + "\n")
        self._fp.flush()

    @contextmanager
    def stage(self, name: str):
        self.emit("stage_start", stage=name)
        started = time.perf_counter()
        try:
            yield self
        except Exception as e:
            self.emit("stage_failed", stage=name, error=type(e).__name__, message=str(e))
            raise
        self.emit("stage_finish", stage=name, seconds=round(time.perf_counter() - started, 3))

    def epoch_callback(self, stage: str):
        def on_epoch(epoch: int, loss: float):
            self.emit("epoch", stage=stage, epoch=epoch, loss=loss)

        return on_epoch

    def close(self):
        if not self._fp.closed:
            self._fp.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def read_events(run_dir) -> list:
    with open(Path(run_dir) / EVENTS_FILE, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
