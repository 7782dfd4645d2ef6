from __future__ import annotations

import threading
import time


class VirtualClock:
    """Wall clock running ``speedup`` times faster from ``start``.

    ``virtual:3600`` makes one real second an hour, so a simulated day
    takes 24 s.
    """

    def __init__(self, start: float | None = None, speedup: float = 1.0):
        if speedup <= 0:
            raise ValueError("speedup must be positive")
        self.start = time.time() if start is None else float(start)
        self.speedup = float(speedup)
        self._t0 = time.monotonic()

    def __call__(self) -> float:
        return self.start + (time.monotonic() - self._t0) * self.speedup

    def real_seconds(self, virtual: float) -> float:
        return virtual / self.speedup


class ManualClock:
    """Clock that only moves when told to; for deterministic tests."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)
        self._lock = threading.Lock()

    def __call__(self) -> float:
        with self._lock:
            return self._now

    def set(self, t: float) -> None:
        with self._lock:
            self._now = float(t)

    def advance(self, dt: float) -> float:
        with self._lock:
            self._now += dt
            return self._now


def parse_clock_spec(spec: str | None, start: float | None = None):
    """``real`` / ``None`` -> time.time; ``virtual:<speedup>`` -> VirtualClock."""
    if spec in (None, "", "real"):
        return time.time
    kind, _, arg = spec.partition(":")
    if kind != "virtual":
        raise ValueError(f"unknown clock spec {spec!r}")
    try:
        speedup = float(arg) if arg else 1.0
    except ValueError:
        raise ValueError(f"bad speedup in clock spec {spec!r}") from None
    return VirtualClock(start, speedup)
