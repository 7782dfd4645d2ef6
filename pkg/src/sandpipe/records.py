"""Raw measurement records and their two wire variants.

Polled records come out of the toolkit archive already normalized:
endpoints are hostnames and durations are float seconds. Pushed records
are the tool's raw output: endpoints are IP addresses and durations are
ISO-8601 strings such as ``PT0.0005S``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Any

TEST_TYPES = ("latency", "packet-loss", "throughput", "retransmits", "trace")

# traceroute records travel under a different topic word than their type name
TOPIC_WORD = {"trace": "packet-trace"}
TYPE_FOR_TOPIC_WORD = {v: k for k, v in TOPIC_WORD.items()}

PULL = "pull"
PUSH = "push"


def topic_for(test_type: str) -> str:
    return f"perfsonar.raw.{TOPIC_WORD.get(test_type, test_type)}"


def type_for_topic(topic: str) -> str | None:
    parts = topic.split(".")
    if len(parts) != 3 or parts[:2] != ["perfsonar", "raw"]:
        return None
    return TYPE_FOR_TOPIC_WORD.get(parts[2], parts[2])


_NUM = r"(\d+(?:\.\d+)?)"
_DURATION_RE = re.compile(rf"^(-)?P(?:{_NUM}D)?(?:T(?:{_NUM}H)?(?:{_NUM}M)?(?:{_NUM}S)?)?$")


def is_duration(s: str) -> bool:
    return isinstance(s, str) and s not in ("P", "PT", "-P", "-PT") and not s.endswith("T") and bool(_DURATION_RE.match(s))


def parse_duration(s: str) -> float:
    """Parse an ISO-8601 duration (days and time part only) into seconds."""
    m = _DURATION_RE.match(s) if isinstance(s, str) else None
    if m is None or not is_duration(s):
        raise ValueError(f"not an ISO-8601 duration: {s!r}")
    neg, d, h, mi, sec = m.groups()
    if d is None and h is None and mi is None:
        # seconds-only is the common case; float() of the literal is exact
        value = float(sec)
    else:
        value = float(d or 0) * 86400 + float(h or 0) * 3600 + float(mi or 0) * 60 + float(sec or 0)
    return -value if neg else value


def format_duration(seconds: float) -> str:
    """Seconds as ``PT<decimal>S``; parse_duration inverts it exactly."""
    seconds = float(seconds)
    sign = "-" if seconds < 0 else ""
    text = format(Decimal(repr(abs(seconds))), "f")
    return f"{sign}PT{text}S"


@dataclass(frozen=True)
class Measurement:
    """One logical test result, independent of how it is transported."""

    test_type: str
    timestamp: float
    source: str
    destination: str
    values: dict[str, Any] = field(default_factory=dict, hash=False, compare=True)

    @property
    def key(self) -> tuple[float, str, str, str]:
        return (self.timestamp, self.source, self.destination, self.test_type)


def _durations_to_iso(test_type: str, values: dict) -> dict:
    out = dict(values)
    if test_type == "latency":
        if "rtt" in out:
            out["rtt"] = format_duration(out["rtt"])
        if "delays" in out:
            out["delays"] = [[format_duration(d), n] for d, n in out["delays"]]
    elif test_type in ("throughput", "retransmits"):
        if "duration" in out:
            out["duration"] = format_duration(out["duration"])
    elif test_type == "trace":
        out["hops"] = [dict(h, rtt=format_duration(h["rtt"])) if h.get("rtt") is not None else dict(h) for h in out.get("hops", [])]
    return out


def to_pull_record(m: Measurement) -> dict:
    return {
        "variant": PULL,
        "test_type": m.test_type,
        "timestamp": m.timestamp,
        "source": m.source,
        "destination": m.destination,
        "values": m.values,
    }


def to_push_record(m: Measurement, host_ip: dict[str, str]) -> dict:
    return {
        "variant": PUSH,
        "test_type": m.test_type,
        "timestamp": m.timestamp,
        "source": host_ip[m.source],
        "destination": host_ip[m.destination],
        "values": _durations_to_iso(m.test_type, m.values),
    }


def encode(record: dict) -> bytes:
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode()


def decode(payload: bytes) -> dict:
    obj = json.loads(payload)
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    return obj
