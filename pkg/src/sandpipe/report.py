"""Per-type volume report and the weekly HTCondor transfer summary."""

from __future__ import annotations

import math
import re
from collections import defaultdict
from typing import Iterable

from .records import TEST_TYPES

REPORT_TYPES = TEST_TYPES + ("htcondor-xfer", "xrootd-tcp")
HTCONDOR = "htcondor-xfer"

_WINDOW = re.compile(r"^(\d+(?:\.\d+)?)([smhdw]?)$")
_UNITS = {"": 1, "s": 1, "m": 60, "h": 3600, "d": 86400, "w": 7 * 86400}


def parse_window(text: str) -> float:
    m = _WINDOW.match(text.strip())
    if not m:
        raise ValueError(f"bad window {text!r}; use e.g. 7d, 12h, 3600")
    seconds = float(m.group(1)) * _UNITS[m.group(2)]
    if seconds <= 0:
        raise ValueError("window must be positive")
    return seconds


def _size(doc: dict) -> int:
    from .store import serialize

    return len(serialize(doc).encode())


def _volume(doc: dict) -> int:
    total = 0
    for k in ("BytesSent", "BytesRecvd"):
        v = doc.get(k)
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            total += int(v)
    return total


def build_report(docs: Iterable[dict], window: float = 7 * 86400, end: float | None = None) -> dict:
    """Report over [end - window, end).

    ``end`` defaults to just past the newest document, so the output depends
    only on the documents and the window.
    """
    docs = [d for d in docs if isinstance(d.get("timestamp"), (int, float))]
    if end is None:
        end = math.nextafter(max(d["timestamp"] for d in docs), math.inf) if docs else 0.0
    start = end - window
    prev_start = start - window
    days = window / 86400

    types = {t: {"count": 0, "bytes": 0} for t in REPORT_TYPES}
    cur_hosts: dict[str, dict] = defaultdict(lambda: {"transfers": 0, "bytes": 0, "segments_lost": 0})
    prev_hosts: dict[str, int] = defaultdict(int)
    for d in docs:
        ts = d["timestamp"]
        t = d.get("test_type", "unknown")
        if start <= ts < end:
            row = types.setdefault(t, {"count": 0, "bytes": 0})
            row["count"] += 1
            row["bytes"] += _size(d)
            if t == HTCONDOR:
                h = cur_hosts[d.get("source_host", "unknown")]
                h["transfers"] += 1
                h["bytes"] += _volume(d)
                lost = d.get("SegmentsLost")
                if isinstance(lost, (int, float)):
                    h["segments_lost"] += lost
        elif prev_start <= ts < start and t == HTCONDOR:
            prev_hosts[d.get("source_host", "unknown")] += _volume(d)

    for row in types.values():
        row["rate_per_day"] = row["count"] / days

    hosts = {}
    for host in sorted(set(cur_hosts) | set(prev_hosts)):
        cur = cur_hosts.get(host, {"transfers": 0, "bytes": 0, "segments_lost": 0})
        prev = prev_hosts.get(host, 0)
        hosts[host] = {
            "transfers": cur["transfers"],
            "bytes": cur["bytes"],
            "previous_bytes": prev,
            "delta_bytes": cur["bytes"] - prev,
            "delta_pct": (cur["bytes"] - prev) / prev * 100 if prev else None,
            "mean_segments_lost": cur["segments_lost"] / cur["transfers"] if cur["transfers"] else None,
        }
    silent = sorted(h for h in prev_hosts if h not in cur_hosts)

    total_count = sum(r["count"] for r in types.values())
    return {
        "window": {"start": start, "end": end, "seconds": window},
        "types": dict(sorted(types.items())),
        "total": {
            "count": total_count,
            "bytes": sum(r["bytes"] for r in types.values()),
            "rate_per_day": total_count / days,
        },
        "htcondor": {"hosts": hosts, "stopped_reporting": silent},
    }


def _human_bytes(n: float) -> str:
    for unit in ("B", "kB", "MB", "GB", "TB"):
        if abs(n) < 1000 or unit == "TB":
            return f"{n:.0f}{unit}" if unit == "B" else f"{n:.1f}{unit}"
        n /= 1000
    return str(n)


def format_report(rep: dict) -> str:
    lines = [f"{'Type':<16}{'Tests':>10}{'Tests/day':>12}{'Storage':>12}"]
    for t, row in rep["types"].items():
        lines.append(f"{t:<16}{row['count']:>10}{row['rate_per_day']:>12.1f}{_human_bytes(row['bytes']):>12}")
    tot = rep["total"]
    lines.append(f"{'Total':<16}{tot['count']:>10}{tot['rate_per_day']:>12.1f}{_human_bytes(tot['bytes']):>12}")
    lines.append("")
    lines.append("HTCondor transfers by submit host")
    hosts = rep["htcondor"]["hosts"]
    if not hosts:
        lines.append("  (none)")
    for host, h in hosts.items():
        delta = "n/a" if h["delta_pct"] is None else f"{h['delta_pct']:+.1f}%"
        lost = "n/a" if h["mean_segments_lost"] is None else f"{h['mean_segments_lost']:.2f}"
        lines.append(f"  {host:<32} {h['transfers']:>6} xfers {_human_bytes(h['bytes']):>10}  wow {delta:>8}  lost/xfer {lost}")
    silent = rep["htcondor"]["stopped_reporting"]
    lines.append("Stopped reporting: " + (", ".join(silent) if silent else "none"))
    return "\n".join(lines)
