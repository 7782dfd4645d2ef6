from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ..records import TEST_TYPES


@dataclass(frozen=True)
class ToolkitEndpoint:
    hostname: str
    base_url: str
    meshes: tuple[str, ...] = ()
    test_types: tuple[str, ...] = TEST_TYPES


@dataclass
class ToolkitState:
    hostname: str
    last_collected: dict[str, float] = field(default_factory=dict)
    push_detected: bool = False
    # 0.0 means "due now"; None means never poll again
    next_poll_at: float | None = 0.0

    def advance(self, test_type: str, ts: float) -> None:
        if ts > self.last_collected.get(test_type, float("-inf")):
            self.last_collected[test_type] = ts

    def mark_push(self) -> None:
        self.push_detected = True
        self.next_poll_at = None

    def to_json(self) -> dict:
        return {
            "hostname": self.hostname,
            "last_collected": self.last_collected,
            "push_detected": self.push_detected,
            "next_poll_at": self.next_poll_at,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ToolkitState":
        s = cls(d["hostname"], dict(d.get("last_collected", {})), bool(d.get("push_detected")), d.get("next_poll_at", 0.0))
        if s.push_detected:
            s.next_poll_at = None
        return s


class CollectorState:
    """Per-toolkit state, optionally persisted as one JSON file per hostname.

    Files are replaced atomically (write to a temp file, then rename), so a
    crash leaves either the old or the new state, never a torn one.
    """

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory else None
        self._states: dict[str, ToolkitState] = {}
        self._lock = threading.Lock()
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            for p in sorted(self.directory.glob("*.json")):
                with open(p, encoding="utf-8") as fh:
                    s = ToolkitState.from_json(json.load(fh))
                self._states[s.hostname] = s

    def get(self, hostname: str) -> ToolkitState:
        with self._lock:
            s = self._states.get(hostname)
            if s is None:
                s = self._states[hostname] = ToolkitState(hostname)
            return s

    def peek(self, hostname: str) -> ToolkitState | None:
        return self._states.get(hostname)

    def __iter__(self):
        return iter(list(self._states.values()))

    def save(self, hostname: str) -> None:
        if self.directory is None:
            return
        with self._lock:
            data = json.dumps(self._states[hostname].to_json(), sort_keys=True)
            fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{hostname}.", suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.directory / f"{hostname}.json")
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


def is_due(state: ToolkitState | None, now: float) -> bool:
    if state is None:
        return True
    if state.push_detected or state.next_poll_at is None:
        return False
    return now >= state.next_poll_at


def schedule(endpoints: Iterable[ToolkitEndpoint], state: CollectorState, now: float) -> list[ToolkitEndpoint]:
    """Toolkits whose next poll time has arrived and that are not pushing."""
    return [e for e in endpoints if is_due(state.peek(e.hostname), now)]
