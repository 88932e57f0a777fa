import json
import os
import threading
import time
import logging
from typing import List, Dict, Any, Optional

logger = logging.getLogger(__name__)

INDEX_NAME = "checkpoints.json"


class CheckpointRegistry:
    """JSON index of the checkpoints written into one output directory.

    One instance per index file; entries move from "writing" to "complete"
    once the checkpoint file has been renamed into place.
    """
    _instances: Dict[str, "CheckpointRegistry"] = {}
    _lock = threading.Lock()

    def __new__(cls, directory: str = "."):
        filepath = os.path.abspath(os.path.join(directory, INDEX_NAME))
        with cls._lock:
            instance = cls._instances.get(filepath)
            if instance is None:
                instance = super().__new__(cls)
                instance._initialized = False
                cls._instances[filepath] = instance
        return instance

    def __init__(self, directory: str = "."):
        if self._initialized:
            return

        self._initialized = True
        self.directory = directory
        self.filepath = os.path.join(directory, INDEX_NAME)
        self.file_lock = threading.Lock()
        self._ensure_file_exists()
        logger.info(f"[CHECKPOINT] Registry at {self.filepath}")

    def _ensure_file_exists(self):
        os.makedirs(self.directory, exist_ok=True)
        if not os.path.exists(self.filepath):
            with open(self.filepath, 'w', encoding='utf-8') as f:
                json.dump([], f)

    def _read_entries(self) -> List[Dict[str, Any]]:
        with self.file_lock:
            try:
                with open(self.filepath, 'r', encoding='utf-8') as f:
                    return json.load(f)
            except (json.JSONDecodeError, FileNotFoundError):
                return []

    def _write_entries(self, entries: List[Dict[str, Any]]):
        with self.file_lock:
            tmp_path = f"{self.filepath}.tmp"
            with open(tmp_path, 'w', encoding='utf-8') as f:
                json.dump(entries, f, indent=2)
            os.replace(tmp_path, self.filepath)

    def begin(self, step: int, path: str, config_hash: str) -> Dict[str, Any]:
        entries = [e for e in self._read_entries() if e.get("path") != path]
        entry = {
            "step": step,
            "path": path,
            "config_hash": config_hash,
            "timestamp": time.time(),
            "status": "writing"
        }
        entries.append(entry)
        self._write_entries(entries)
        return entry

    def mark_complete(self, path: str):
        entries = self._read_entries()
        for entry in entries:
            if entry.get("path") == path:
                entry["status"] = "complete"
                entry["completed_at"] = time.time()
                break
        self._write_entries(entries)
        logger.info(f"[CHECKPOINT] Registered {os.path.basename(path)}")

    def mark_failed(self, path: str):
        entries = self._read_entries()
        for entry in entries:
            if entry.get("path") == path:
                entry["status"] = "failed"
                break
        self._write_entries(entries)
        logger.warning(f"[CHECKPOINT] Marked as failed: {path}")

    def get_all(self) -> List[Dict[str, Any]]:
        return self._read_entries()

    def latest(self) -> Optional[Dict[str, Any]]:
        complete = [e for e in self.get_all()
                    if e.get("status") == "complete" and os.path.exists(e.get("path", ""))]
        if not complete:
            return None
        return max(complete, key=lambda e: (e["step"], e.get("completed_at", 0)))

    @classmethod
    def reset_instances(cls):
        with cls._lock:
            cls._instances.clear()
