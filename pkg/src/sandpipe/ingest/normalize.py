from __future__ import annotations

import hashlib
import ipaddress
import re
from dataclasses import dataclass, field
from typing import Any

from ..records import PULL, PUSH, TEST_TYPES, is_duration, parse_duration
from .topology import SiteTopology

NORMALIZED_TYPES = TEST_TYPES + ("htcondor-xfer", "xrootd-tcp")


class RecordError(ValueError):
    """A raw record that cannot be normalized; routed to the dead-letter queue."""


@dataclass(frozen=True)
class NormalizedRecord:
    test_type: str
    timestamp: float
    source_host: str | None
    source_ip: str | None
    dest_host: str | None
    dest_ip: str | None
    values: dict[str, Any] = field(hash=False)
    # provenance only; push and pull copies of one measurement compare equal
    origin: str = field(default=PULL, compare=False)


def _is_ip(s: str) -> bool:
    try:
        ipaddress.ip_address(s)
    except ValueError:
        return False
    return True


def resolve_endpoint(endpoint: str, topo: SiteTopology) -> tuple[str | None, str | None]:
    """(hostname, ip) for an endpoint given either as a name or an address."""
    if _is_ip(endpoint):
        return topo.host_for(endpoint), endpoint
    return endpoint, topo.ip_for(endpoint)


_IDENTITY_KEYS = {"ip", "hostname", "host", "name"}
_DURATION_LIKE = re.compile(r"^-?P(T|\d)")


def _seconds(obj, path: str = "values"):
    if isinstance(obj, dict):
        return {k: (v if k in _IDENTITY_KEYS else _seconds(v, f"{path}.{k}")) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_seconds(v, f"{path}[{i}]") for i, v in enumerate(obj)]
    if isinstance(obj, str) and _DURATION_LIKE.match(obj):
        if not is_duration(obj):
            raise RecordError(f"unparseable duration {obj!r} at {path}")
        return parse_duration(obj)
    return obj


def normalize(raw: dict, topo: SiteTopology) -> NormalizedRecord:
    variant = raw.get("variant")
    if variant not in (PULL, PUSH):
        raise RecordError(f"missing or unknown variant {variant!r}")
    test_type = raw.get("test_type")
    if test_type not in NORMALIZED_TYPES:
        raise RecordError(f"unknown test_type {test_type!r}")
    ts = raw.get("timestamp")
    if isinstance(ts, bool) or not isinstance(ts, (int, float)):
        raise RecordError(f"missing or non-numeric timestamp {ts!r}")
    src, dst = raw.get("source"), raw.get("destination")
    if not isinstance(src, str) or not src or not isinstance(dst, str) or not dst:
        raise RecordError("missing source or destination")
    values = raw.get("values")
    if not isinstance(values, dict):
        raise RecordError("values must be an object")
    src_host, src_ip = resolve_endpoint(src, topo)
    dst_host, dst_ip = resolve_endpoint(dst, topo)
    return NormalizedRecord(
        test_type=test_type,
        timestamp=float(ts),
        source_host=src_host,
        source_ip=src_ip,
        dest_host=dst_host,
        dest_ip=dst_ip,
        values=_seconds(values),
        origin=variant,
    )


def canonical_key(n: NormalizedRecord) -> str:
    src = n.source_host or n.source_ip or ""
    dst = n.dest_host or n.dest_ip or ""
    return f"{n.timestamp:.3f}|{src}|{dst}|{n.test_type}"


def record_id(n: NormalizedRecord) -> str:
    """SHA-256 over timestamp (ms), source, destination and test type.

    Push and pull copies of the same test resolve to the same hostnames,
    so they collide here and the store keeps one document.
    """
    return hashlib.sha256(canonical_key(n).encode()).hexdigest()
