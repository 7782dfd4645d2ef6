from __future__ import annotations

import hashlib
import json
import math
import statistics
import time
from typing import Any

from .normalize import NormalizedRecord, RecordError, record_id
from .topology import SiteTopology

# types whose measurement values go into the document untouched
PASSTHROUGH = ("throughput", "packet-loss", "retransmits")


def flatten(obj: dict, prefix: str = "") -> dict[str, Any]:
    """Collapse nested maps and lists into ``a_b`` / ``a_<i>_b`` scalar keys."""
    out: dict[str, Any] = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "_"))
        elif isinstance(v, list):
            for i, item in enumerate(v):
                if isinstance(item, dict):
                    out.update(flatten(item, f"{key}_{i}_"))
                elif isinstance(item, list):
                    out.update(flatten({str(j): x for j, x in enumerate(item)}, f"{key}_{i}_"))
                else:
                    out[f"{key}_{i}"] = item
        else:
            out[key] = v
    return out


def loss_fraction(expected: int, received: int) -> float:
    if expected <= 0:
        raise RecordError(f"expected packet count must be positive, got {expected}")
    if not 0 <= received <= expected:
        raise RecordError(f"received {received} outside [0, {expected}]")
    # (e - r) / e rather than 1 - r/e: 6/600 is exactly the float 0.01
    return (expected - received) / expected


def latency_summary(values: dict) -> dict[str, Any]:
    expected = values.get("expected")
    received = values.get("received")
    if not isinstance(expected, int) or not isinstance(received, int):
        raise RecordError("latency record needs integer expected/received counts")
    out: dict[str, Any] = {
        "expected": expected,
        "received": received,
        "loss_fraction": loss_fraction(expected, received),
    }
    if "rtt" in values:
        out["rtt"] = values["rtt"]
    hist = values.get("delays") or []
    samples: list[float] = []
    for i, pair in enumerate(hist):
        try:
            d, n = pair
        except (TypeError, ValueError):
            raise RecordError(f"bad delay histogram entry {pair!r}") from None
        if not isinstance(d, (int, float)) or not isinstance(n, int) or n < 0:
            raise RecordError(f"bad delay histogram entry {pair!r}")
        out[f"delay_hist_{i}_s"] = d
        out[f"delay_hist_{i}_n"] = n
        samples.extend([float(d)] * n)
    out["delay_hist_bins"] = len(hist)
    if samples:
        out["delay_min"] = min(samples)
        out["delay_max"] = max(samples)
        out["delay_mean"] = math.fsum(samples) / len(samples)
        out["delay_median"] = statistics.median(samples)
    return out


def trace_annotation(n: NormalizedRecord, topo: SiteTopology) -> dict[str, Any]:
    hops = n.values.get("hops")
    if not isinstance(hops, list):
        raise RecordError("trace record needs a hop list")
    out: dict[str, Any] = {"hop_count": len(hops)}
    last_ip = None
    prev = 0
    for pos, hop in enumerate(hops, start=1):
        if not isinstance(hop, dict):
            raise RecordError(f"bad hop {hop!r}")
        index = hop.get("ttl", pos)
        if not isinstance(index, int) or index <= prev:
            raise RecordError(f"hop indices must increase from 1, got {index!r} after {prev}")
        prev = index
        ip = hop.get("ip")
        p = f"hop_{pos}_"
        out[p + "index"] = index
        out[p + "ip"] = ip
        host = topo.host_for(ip) if ip else None
        if host is not None:
            out[p + "hostname"] = host
        asn = topo.asn_for(ip)
        if asn is not None:
            out[p + "asn"] = asn
        rtt = hop.get("rtt")
        if rtt is not None:
            out[p + "rtt"] = rtt
        last_ip = ip
    out["destination_reached"] = last_ip is not None and last_ip == n.dest_ip
    return out


def site_fields(n: NormalizedRecord, topo: SiteTopology) -> dict[str, Any]:
    out = {}
    for side, host in (("source", n.source_host), ("dest", n.dest_host)):
        site = topo.site_for(host)
        if site:
            for k, v in site.items():
                out[f"{side}_{k}"] = v
    return out


def enrich(n: NormalizedRecord, topo: SiteTopology, ingest_time: float | None = None) -> dict[str, Any]:
    doc: dict[str, Any] = {
        "id": record_id(n),
        "test_type": n.test_type,
        "timestamp": n.timestamp,
        "origin": n.origin,
    }
    for k in ("source_host", "source_ip", "dest_host", "dest_ip"):
        v = getattr(n, k)
        if v is not None:
            doc[k] = v
    doc.update(site_fields(n, topo))
    if n.test_type == "latency":
        doc.update(latency_summary(n.values))
    elif n.test_type == "trace":
        doc.update(trace_annotation(n, topo))
    else:
        doc.update(flatten(n.values))
        if n.test_type == "packet-loss" and "expected" in n.values and "received" in n.values:
            doc["loss_fraction"] = loss_fraction(n.values["expected"], n.values["received"])
    doc["ingest_time"] = time.time() if ingest_time is None else ingest_time
    return doc


def enrich_meta(raw: dict, topic: str, ingest_time: float | None = None) -> dict[str, Any]:
    """Pass-through for status/metadata records: flatten and give an id."""
    body = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    doc = flatten(raw)
    doc["id"] = hashlib.sha256(f"{topic}|{body}".encode()).hexdigest()
    doc.setdefault("test_type", "meta." + topic.rsplit(".", 1)[-1])
    doc.setdefault("timestamp", 0.0)
    doc["ingest_time"] = time.time() if ingest_time is None else ingest_time
    return doc
