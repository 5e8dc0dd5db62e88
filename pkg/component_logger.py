import os
import time
import json
import logging
import threading
from datetime import datetime
from functools import wraps
from typing import Any, Dict, List, Optional

logger = logging.getLogger("component_logger")

SPLITS = ("train", "val", "test")


class ComponentLogger:
    """Logs usage and wall time of the pipeline stages."""

    def __init__(self, log_file: Optional[str] = None, analytics_file: Optional[str] = None):
        self.log_file = log_file
        self.analytics_file = analytics_file
        self.timings: Dict[str, float] = {}
        self._lock = threading.Lock()
        self.analytics = self._load_analytics()

    def log_usage(self, component_name: str, action: str = "used", metadata: Optional[Dict[str, Any]] = None,
                  elapsed_s: Optional[float] = None):
        """Log a stage usage event"""
        timestamp = datetime.now().strftime("%Y-%m-%d %H:%M:%S")
        log_entry = f"{timestamp} | {component_name} | {action}"
        if metadata:
            log_entry += f" | {json.dumps(metadata, sort_keys=True, default=str)}"

        with self._lock:
            if self.log_file:
                with open(self.log_file, "a") as f:
                    f.write(log_entry + "\n")

            if component_name not in self.analytics:
                self.analytics[component_name] = {"usage_count": 0, "first_used": timestamp, "last_used": timestamp}
            self.analytics[component_name]["usage_count"] += 1
            self.analytics[component_name]["last_used"] = timestamp

            if elapsed_s is not None:
                self.timings[component_name] = self.timings.get(component_name, 0.0) + elapsed_s
            self._save_analytics()

        logger.debug(log_entry)
        return True

    def _load_analytics(self) -> Dict[str, Any]:
        if self.analytics_file and os.path.exists(self.analytics_file):
            try:
                with open(self.analytics_file, "r") as f:
                    return json.load(f)
            except (OSError, ValueError):
                logger.warning(f"Could not read analytics file {self.analytics_file}, starting fresh")
                return {}
        return {}

    def _save_analytics(self):
        if not self.analytics_file:
            return
        with open(self.analytics_file, "w") as f:
            json.dump(self.analytics, f, indent=2)

    def get_analytics(self) -> Dict[str, Any]:
        return self.analytics

    def stage_timings(self) -> Dict[str, float]:
        return {name: round(seconds, 3) for name, seconds in sorted(self.timings.items())}

    def reset(self):
        with self._lock:
            self.timings.clear()
            self.analytics = {}


class AccessLog:
    """Audit trail of which data split each command read.

    The training stage must never touch the test split; `assert_not_read` is the
    check used by the CLI and the tests.
    """

    def __init__(self, path: Optional[str] = None):
        self.path = path
        self.entries: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

    def record(self, command: str, subject_id: str, split: str, n_items: int = 0, source: str = ""):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        entry = {"command": command, "subject": subject_id, "split": split, "items": int(n_items), "source": source}
        with self._lock:
            self.entries.append(entry)
            if self.path:
                with open(self.path, "a") as f:
                    f.write(json.dumps(entry, sort_keys=True) + "\n")
        logger.debug(f"access {command} {subject_id} {split} ({n_items} items)")

    def splits_read(self, command: Optional[str] = None) -> List[str]:
        with self._lock:
            return sorted({e["split"] for e in self.entries if command is None or e["command"] == command})

    def assert_not_read(self, command: str, split: str):
        if split in self.splits_read(command):
            raise AssertionError(f"command {command!r} read the {split!r} split")

    def clear(self):
        with self._lock:
            self.entries.clear()


# Create singleton instances
component_logger = ComponentLogger()
access_log = AccessLog()


# Decorator for timing pipeline stages
def log_component(component_name: str):
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            start = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                component_logger.log_usage(
                    component_name,
                    action=f"called_{func.__name__}",
                    metadata={"args_count": len(args), "kwargs": sorted(kwargs.keys())},
                    elapsed_s=time.perf_counter() - start,
                )
        return wrapper
    return decorator
