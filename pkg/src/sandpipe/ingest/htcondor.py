"""Enrichment of HTCondor file-transfer TCP statistics log lines.

A line looks like::

    2021-04-14 12:00:05.120 Peer=192.0.2.77 JobId=1234.0 BytesSent=1048576 ...

i.e. a UTC date and time followed by ``Key=Value`` pairs.
"""

from __future__ import annotations

import hashlib
import re
import time
from datetime import datetime, timezone
from typing import Any

from .normalize import RecordError
from .topology import SiteTopology

_INT = re.compile(r"^[-+]?\d+$")
_FLOAT = re.compile(r"^[-+]?(\d+\.\d*|\.\d+|\d+)([eE][-+]?\d+)?$")

DEST_KEY = "Peer"


def native(value: str) -> int | float | str:
    if _INT.match(value):
        return int(value)
    if _FLOAT.match(value):
        return float(value)
    return value


def parse_line_time(date: str, clock: str) -> float:
    for fmt in ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S"):
        try:
            dt = datetime.strptime(f"{date} {clock}", fmt)
        except ValueError:
            continue
        return dt.replace(tzinfo=timezone.utc).timestamp()
    raise RecordError(f"unparseable timestamp {date} {clock!r}")


def domain_of(hostname: str | None) -> str | None:
    if not hostname or "." not in hostname:
        return None
    return hostname.split(".", 1)[1]


def htcondor_id(raw_line: str, reporting_host: str) -> str:
    return hashlib.sha256(f"{raw_line}|{reporting_host}".encode()).hexdigest()


def enrich_htcondor(
    raw_line: str,
    reporting_host: str,
    topo: SiteTopology,
    ingest_time: float | None = None,
) -> dict[str, Any]:
    line = raw_line.rstrip("\n")
    tokens = line.split()
    if len(tokens) < 3:
        raise RecordError("line needs date, time and key=value pairs")
    pairs: dict[str, str] = {}
    for tok in tokens[2:]:
        k, sep, v = tok.partition("=")
        if not sep or not k:
            raise RecordError(f"token {tok!r} is not key=value")
        pairs[k] = v

    doc: dict[str, Any] = {"test_type": "htcondor-xfer", "source_host": reporting_host}

    # 1. direction, seen from the submit host
    sent = native(pairs.get("BytesSent", "0"))
    doc["direction"] = "upload" if isinstance(sent, (int, float)) and sent > 0 else "download"

    # 2. timestamp
    doc["timestamp"] = parse_line_time(tokens[0], tokens[1])

    # 3. native value types
    for k, v in pairs.items():
        doc[k] = native(v)

    # 4. destination location
    dest_ip = pairs.get(DEST_KEY)
    if dest_ip:
        doc["dest_ip"] = dest_ip
        geo = topo.geo_for(dest_ip)
        if geo:
            doc["dest_lat"] = geo["lat"]
            doc["dest_lon"] = geo["lon"]

        # 5. reverse resolution, keep the domain for grouping by institution
        host = topo.host_for(dest_ip)
        if host:
            doc["dest_host"] = host
            dom = domain_of(host)
            if dom:
                doc["dest_domain"] = dom

    # 6. id
    doc["id"] = htcondor_id(line, reporting_host)
    doc["message"] = line
    doc["ingest_time"] = time.time() if ingest_time is None else ingest_time
    # 7. the caller writes the document
    return doc
