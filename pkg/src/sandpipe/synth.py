"""Seeded synthetic measurement sources.

A ``SyntheticMesh`` is a handful of toolkits that test each other, plus
HTCondor submit hosts and XRootD servers. Every generated record is a pure
function of (seed, record kind, endpoints, millisecond timestamp), so any
time window can be regenerated independently and byte-identically.

Records are placed on absolute per-type time grids: slot ``k`` of a type
with daily rate ``R`` sits at ``k * 86400 / R`` seconds since the epoch,
rounded to the millisecond, and is assigned to pair ``k mod P``.
"""

from __future__ import annotations

import datetime as dt
import json
import logging
import math
import threading
import time
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable

import numpy as np

from .bus import Broker, PublishDenied
from .ingest.topology import SiteTopology
from .records import Measurement, encode, to_pull_record, to_push_record, topic_for

logger = logging.getLogger(__name__)

# Production tests/day per type; the mesh multiplies these by ``scale``.
PRODUCTION_RATES = {
    "latency": 7.95e6,
    "packet-loss": 8.08e6,
    "retransmits": 18.8e3,
    "throughput": 19.2e3,
    "trace": 2.14e6,
    "htcondor-xfer": 446e3,
    "xrootd-tcp": 1.0e6,
}
DEFAULT_SCALE = 1e-4
EXPECTED_PACKETS = 600
DELAY_BIN = 1e-5
DAY = 86400.0


def _crc(s: str) -> int:
    return zlib.crc32(s.encode())


def record_rng(seed: int, kind: str, src: str, dst: str, ms: int) -> np.random.Generator:
    return np.random.default_rng([seed, _crc(kind), _crc(src), _crc(dst), ms])


def fmt_line_time(ms: int) -> str:
    t = dt.datetime.fromtimestamp(ms // 1000, dt.timezone.utc)
    return t.strftime("%Y-%m-%d %H:%M:%S") + f".{ms % 1000:03d}"


@dataclass(frozen=True)
class ToolkitSpec:
    hostname: str
    ip: str
    site: str
    vo: str = "osg"
    lat: float = 0.0
    lon: float = 0.0
    asn: int = 64500
    mode: str = "pull"


@dataclass(frozen=True)
class PairParams:
    p_loss: float = 0.001
    delay: float = 0.0005
    jitter: float = 2e-5
    bandwidth: float = 9.4e9
    retransmit_rate: float = 3.0


@dataclass(frozen=True)
class Pair:
    src: ToolkitSpec
    dst: ToolkitSpec
    params: PairParams


def _grid(rate_per_day: float, start: float, end: float) -> Iterable[tuple[int, int]]:
    """(slot index, ms timestamp) for grid slots with start <= t < end."""
    if rate_per_day <= 0:
        return
    period = DAY / rate_per_day
    k = max(0, math.ceil(start / period) - 1)
    while True:
        ms = int(round(k * period * 1000))
        t = ms / 1000
        if t >= end:
            return
        if t >= start:
            yield k, ms
        k += 1


def _selected(k: int, ratio: float) -> bool:
    """Evenly spread subset of slots with density ``ratio``."""
    return math.floor((k + 1) * ratio) > math.floor(k * ratio)


# generators


def generate_latency_batch(pair: Pair, ms: int, rng: np.random.Generator) -> tuple[Measurement, Measurement]:
    """One 600-packet owamp run: a latency record and a packet-loss record."""
    p = pair.params
    lost = int(rng.binomial(EXPECTED_PACKETS, p.p_loss)) if p.p_loss > 0 else 0
    received = EXPECTED_PACKETS - lost
    noise = rng.exponential(p.jitter, size=received) if p.jitter > 0 else np.zeros(received)
    delays = np.round((p.delay + noise) / DELAY_BIN).astype(np.int64)
    bins, counts = np.unique(delays, return_counts=True)
    hist = [[round(int(b) * DELAY_BIN, 5), int(c)] for b, c in zip(bins, counts)]
    ts = ms / 1000
    src, dst = pair.src.hostname, pair.dst.hostname
    rtt = round(2 * p.delay + (float(np.median(noise)) if received else 0.0), 6)
    lat = Measurement("latency", ts, src, dst, {"expected": EXPECTED_PACKETS, "received": received, "rtt": rtt, "delays": hist})
    loss = Measurement("packet-loss", ts, src, dst, {"expected": EXPECTED_PACKETS, "received": received, "lost": lost})
    return lat, loss


def generate_throughput(pair: Pair, ms: int, rng: np.random.Generator) -> tuple[Measurement, Measurement]:
    p = pair.params
    ts = ms / 1000
    src, dst = pair.src.hostname, pair.dst.hostname
    bps = int(p.bandwidth * rng.uniform(0.6, 1.0))
    retrans = int(rng.poisson(p.retransmit_rate)) if p.retransmit_rate > 0 else 0
    duration = 20.0
    thr = Measurement("throughput", ts, src, dst, {"throughput": bps, "duration": duration, "streams": 1})
    rtx = Measurement("retransmits", ts, src, dst, {"retransmits": retrans, "duration": duration})
    return thr, rtx


def generate_trace(pair: Pair, ms: int, path: list[str], rng: np.random.Generator) -> Measurement:
    hops = []
    rtt = 0.0
    step = 2 * pair.params.delay / max(len(path), 1)
    for ttl, ip in enumerate(path, start=1):
        rtt += step * rng.uniform(0.8, 1.2)
        hops.append({"ttl": ttl, "ip": ip, "rtt": round(rtt, 6)})
    return Measurement("trace", ms / 1000, pair.src.hostname, pair.dst.hostname, {"hops": hops})


def generate_htcondor_line(ms: int, peer_ip: str, job: int, rng: np.random.Generator) -> str:
    size = int(rng.integers(1 << 20, 1 << 32))
    upload = bool(rng.integers(0, 2))
    sent, recvd = (size, 0) if upload else (0, size)
    lost = int(rng.poisson(2.0))
    rtt = round(float(rng.uniform(0.001, 0.15)), 6)
    return (
        f"{fmt_line_time(ms)} Peer={peer_ip} JobId={job}.0 BytesSent={sent} BytesRecvd={recvd} "
        f"SegmentsLost={lost} SegmentsOut={size // 1448 + 1} RTT={rtt} Transport=tcp"
    )


def generate_xrootd(ms: int, host: str, peer_ip: str, rng: np.random.Generator) -> bytes:
    body = {
        "host": host,
        "peer": peer_ip,
        "timestamp": ms / 1000,
        "bytes": int(rng.integers(1 << 20, 1 << 34)),
        "tcpi_rtt": int(rng.integers(200, 150000)),
        "tcpi_total_retrans": int(rng.poisson(3.0)),
        "tcpi_snd_cwnd": int(rng.integers(10, 4000)),
    }
    return encode(body)


# the mesh


@dataclass
class SyntheticMesh:
    seed: int = 0
    toolkits: list[ToolkitSpec] = field(default_factory=list)
    scale: float = DEFAULT_SCALE
    rates: dict[str, float] = field(default_factory=lambda: dict(PRODUCTION_RATES))
    pair_params: dict[tuple[str, str], PairParams] = field(default_factory=dict)
    default_params: PairParams = field(default_factory=PairParams)
    submit_hosts: list[str] = field(default_factory=list)
    xrootd_hosts: list[str] = field(default_factory=list)
    # submit host -> epoch seconds after which it stops producing lines
    silent_after: dict[str, float] = field(default_factory=dict)
    path_table: dict[tuple[str, str], list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.toolkits:
            raise ValueError("mesh needs at least one toolkit")
        names = [t.hostname for t in self.toolkits]
        if len(set(names)) != len(names):
            raise ValueError("toolkit hostnames must be unique")
        unknown = set(self.rates) - set(PRODUCTION_RATES)
        if unknown:
            raise ValueError(f"unknown rate types {sorted(unknown)}")
        self.rates = {**PRODUCTION_RATES, **self.rates}
        self.by_host = {t.hostname: t for t in self.toolkits}
        self.pairs = [
            Pair(a, b, self.pair_params.get((a.hostname, b.hostname), self.default_params))
            for a in self.toolkits
            for b in self.toolkits
            if a is not b
        ]
        self._routers: dict[str, tuple[str, int]] = {}
        self._build_paths()
        self._workers = self._build_workers()

    # construction helpers

    @classmethod
    def generate(cls, seed: int = 0, n_toolkits: int = 4, scale: float = DEFAULT_SCALE, n_submit: int = 2, **kw) -> "SyntheticMesh":
        rng = np.random.default_rng([seed, _crc("layout")])
        kits = []
        for i in range(n_toolkits):
            kits.append(
                ToolkitSpec(
                    hostname=f"ps{i}.site{i}.example.edu",
                    ip=f"10.{1 + i // 250}.{i % 250}.10",
                    site=f"SITE{i}",
                    vo=("atlas", "cms", "osg")[i % 3],
                    lat=round(float(rng.uniform(25, 50)), 4),
                    lon=round(float(rng.uniform(-125, -70)), 4),
                    asn=64512 + i,
                )
            )
        kw.setdefault("submit_hosts", [f"submit{j}.osg.example.org" for j in range(n_submit)])
        kw.setdefault("xrootd_hosts", [f"xrd{j}.osg.example.org" for j in range(max(1, n_submit // 2))])
        return cls(seed=seed, toolkits=kits, scale=scale, **kw)

    @classmethod
    def from_config(cls, cfg: dict) -> "SyntheticMesh":
        """Build from a JSON mesh config (see README for the schema)."""
        known = {"seed", "scale", "n_toolkits", "toolkits", "rates", "pairs", "defaults", "submit_hosts", "xrootd_hosts", "silent_after"}
        extra = set(cfg) - known
        if extra:
            raise ValueError(f"unknown mesh config key(s): {', '.join(sorted(extra))}")
        kw: dict[str, Any] = {}
        if "rates" in cfg:
            kw["rates"] = {k: float(v) for k, v in cfg["rates"].items()}
        if "defaults" in cfg:
            kw["default_params"] = PairParams(**cfg["defaults"])
        if "pairs" in cfg:
            kw["pair_params"] = {(p["src"], p["dst"]): PairParams(**{k: v for k, v in p.items() if k not in ("src", "dst")}) for p in cfg["pairs"]}
        for k in ("submit_hosts", "xrootd_hosts"):
            if k in cfg:
                kw[k] = list(cfg[k])
        if "silent_after" in cfg:
            kw["silent_after"] = {h: float(t) for h, t in cfg["silent_after"].items()}
        seed = int(cfg.get("seed", 0))
        scale = float(cfg.get("scale", DEFAULT_SCALE))
        if "toolkits" in cfg:
            return cls(seed=seed, scale=scale, toolkits=[ToolkitSpec(**t) for t in cfg["toolkits"]], **kw)
        return cls.generate(seed=seed, n_toolkits=int(cfg.get("n_toolkits", 4)), scale=scale, **kw)

    @classmethod
    def load(cls, path) -> "SyntheticMesh":
        with open(path, encoding="utf-8") as fh:
            return cls.from_config(json.load(fh))

    def _build_paths(self) -> None:
        for pair in self.pairs:
            key = (pair.src.hostname, pair.dst.hostname)
            if key in self.path_table:
                continue
            rng = np.random.default_rng([self.seed, _crc("path"), _crc(key[0]), _crc(key[1])])
            n_routers = int(rng.integers(2, 6))
            path = []
            for _ in range(n_routers):
                a, b = int(rng.integers(0, 64)), int(rng.integers(1, 255))
                ip = f"172.16.{a}.{b}"
                asn = 64600 + a % 16
                self._routers.setdefault(ip, (f"r{a}-{b}.as{asn}.example.net", asn))
                path.append(ip)
            path.append(pair.dst.ip)
            self.path_table[key] = path

    def _build_workers(self) -> list[tuple[str, str, ToolkitSpec]]:
        out = []
        for i, t in enumerate(self.toolkits):
            for j in range(2):
                out.append((f"wn{j}.{t.hostname.split('.', 1)[1]}", f"10.200.{i % 250}.{j + 10}", t))
        return out

    def _service_ip(self, host: str, idx: int, kind: int) -> str:
        return f"10.250.{kind}.{idx + 10}"

    def topology(self) -> SiteTopology:
        host_to_site, ip_to_host, ip_to_asn, ip_to_geo = {}, {}, {}, {}
        for t in self.toolkits:
            host_to_site[t.hostname] = {"site": t.site, "vo": t.vo, "lat": t.lat, "lon": t.lon}
            ip_to_host[t.ip] = t.hostname
            ip_to_asn[t.ip] = t.asn
            ip_to_geo[t.ip] = {"lat": t.lat, "lon": t.lon}
        for ip, (host, asn) in self._routers.items():
            ip_to_host[ip] = host
            ip_to_asn[ip] = asn
        for host, ip, t in self._workers:
            ip_to_host[ip] = host
            ip_to_asn[ip] = t.asn
            ip_to_geo[ip] = {"lat": t.lat, "lon": t.lon}
            host_to_site[host] = {"site": t.site, "vo": t.vo, "lat": t.lat, "lon": t.lon}
        for kind, hosts in ((1, self.submit_hosts), (2, self.xrootd_hosts)):
            for i, h in enumerate(hosts):
                ip_to_host[self._service_ip(h, i, kind)] = h
        return SiteTopology(host_to_site, ip_to_host, ip_to_asn, ip_to_geo)

    def host_ip(self) -> dict[str, str]:
        return {t.hostname: t.ip for t in self.toolkits}

    def mesh_config(self, hostname: str) -> dict:
        """Configuration document a toolkit receives from the config service."""
        peers = [p.dst.hostname for p in self.pairs if p.src.hostname == hostname]
        return {"host": hostname, "tests": ["latency", "throughput", "trace"], "peers": peers}

    # rates

    def daily_rate(self, kind: str) -> float:
        return self.rates[kind] * self.scale

    # generation

    def measurements(self, start: float, end: float) -> list[Measurement]:
        """All perfSONAR measurements with start <= timestamp < end, time ordered."""
        out: list[Measurement] = []
        P = len(self.pairs)
        if not P:
            return out
        lat_r, pl_r = self.daily_rate("latency"), self.daily_rate("packet-loss")
        owamp = max(lat_r, pl_r)
        for k, ms in _grid(owamp, start, end):
            pair = self.pairs[k % P]
            lat, loss = generate_latency_batch(pair, ms, record_rng(self.seed, "owamp", pair.src.hostname, pair.dst.hostname, ms))
            if owamp == lat_r or _selected(k, lat_r / owamp):
                out.append(lat)
            if owamp == pl_r or _selected(k, pl_r / owamp):
                out.append(loss)
        thr_r, rtx_r = self.daily_rate("throughput"), self.daily_rate("retransmits")
        iperf = max(thr_r, rtx_r)
        for k, ms in _grid(iperf, start, end):
            pair = self.pairs[k % P]
            thr, rtx = generate_throughput(pair, ms, record_rng(self.seed, "iperf", pair.src.hostname, pair.dst.hostname, ms))
            if iperf == thr_r or _selected(k, thr_r / iperf):
                out.append(thr)
            if iperf == rtx_r or _selected(k, rtx_r / iperf):
                out.append(rtx)
        for k, ms in _grid(self.daily_rate("trace"), start, end):
            pair = self.pairs[k % P]
            path = self.path_table[(pair.src.hostname, pair.dst.hostname)]
            out.append(generate_trace(pair, ms, path, record_rng(self.seed, "trace", pair.src.hostname, pair.dst.hostname, ms)))
        out.sort(key=lambda m: (m.timestamp, m.test_type, m.source, m.destination))
        return out

    def htcondor_lines(self, start: float, end: float) -> list[tuple[str, str]]:
        """(submit host, log line) pairs in time order."""
        out = []
        if not self.submit_hosts or not self._workers:
            return out
        S, W = len(self.submit_hosts), len(self._workers)
        for k, ms in _grid(self.daily_rate("htcondor-xfer"), start, end):
            host = self.submit_hosts[k % S]
            cutoff = self.silent_after.get(host)
            if cutoff is not None and ms / 1000 >= cutoff:
                continue
            _, peer_ip, _ = self._workers[(k // S) % W]
            rng = record_rng(self.seed, "htcondor", host, peer_ip, ms)
            out.append((host, generate_htcondor_line(ms, peer_ip, 1000 + k, rng)))
        return out

    def xrootd_datagrams(self, start: float, end: float) -> list[bytes]:
        out = []
        if not self.xrootd_hosts or not self._workers:
            return out
        X, W = len(self.xrootd_hosts), len(self._workers)
        for k, ms in _grid(self.daily_rate("xrootd-tcp"), start, end):
            host = self.xrootd_hosts[k % X]
            _, peer_ip, _ = self._workers[(k // X) % W]
            out.append(generate_xrootd(ms, host, peer_ip, record_rng(self.seed, "xrootd", host, peer_ip, ms)))
        return out

    def ledger(self, start: float, end: float) -> dict[str, int]:
        """Exact per-type record counts the generators emit for the window."""
        counts = {t: 0 for t in PRODUCTION_RATES}
        for m in self.measurements(start, end):
            counts[m.test_type] += 1
        counts["htcondor-xfer"] = len(self.htcondor_lines(start, end))
        counts["xrootd-tcp"] = len(self.xrootd_datagrams(start, end))
        return counts


# mock toolkits


class BusPushClient:
    """Pushes records to osg.ps-push.raw presenting a bearer token."""

    def __init__(
        self,
        broker: Broker,
        token: str,
        vhost: str = "osg-nma",
        exchange: str = "osg.ps-push.raw",
        refresh: Callable[[], str] | None = None,
    ):
        self.broker = broker
        self.token = token
        self.vhost = vhost
        self.exchange = exchange
        # fetches a fresh token (as a toolkit re-reading its config would)
        self.refresh = refresh

    def __call__(self, key: str, payload: bytes) -> bool:
        for attempt in (0, 1):
            try:
                self.broker.publish(self.vhost, self.exchange, key, payload, credential=self.token)
                return True
            except PublishDenied as e:
                if e.reason == "expired" and self.refresh is not None and attempt == 0:
                    self.token = self.refresh()
                    continue
                logger.warning("push of %s denied: %s", key, e.reason)
                return False
        return False


class HttpPushClient:
    """Same as BusPushClient but through the bus's HTTP publish endpoint."""

    def __init__(self, base_url: str, token: str, vhost: str = "osg-nma", exchange: str = "osg.ps-push.raw"):
        self.url = f"{base_url.rstrip('/')}/publish/{vhost}/{exchange}"
        self.token = token

    def __call__(self, key: str, payload: bytes) -> bool:
        import urllib.error
        import urllib.parse
        import urllib.request

        req = urllib.request.Request(
            f"{self.url}?{urllib.parse.urlencode({'key': key})}",
            data=payload,
            method="POST",
            headers={"Authorization": f"Bearer {self.token}", "Content-Type": "application/json"},
        )
        try:
            with urllib.request.urlopen(req, timeout=10) as resp:
                return resp.status == 200
        except urllib.error.HTTPError as e:
            logger.warning("push of %s refused: HTTP %d", key, e.code)
            return False


class MockToolkit:
    """A toolkit's local archive of the tests it ran, exposed by pull and/or push.

    Measurements become visible once ``now`` reaches their timestamp.
    """

    def __init__(
        self,
        spec: ToolkitSpec,
        measurements: Iterable[Measurement],
        host_ip: dict[str, str],
        mode: str | None = None,
        push: Callable[[str, bytes], bool] | None = None,
        clock: Callable[[], float] = time.time,
    ):
        self.spec = spec
        self.hostname = spec.hostname
        self.mode = mode or spec.mode
        if self.mode not in ("pull", "push", "both"):
            raise ValueError(f"unknown toolkit mode {self.mode!r}")
        if self.mode != "pull" and push is None:
            raise ValueError("push mode needs a push client")
        self.push = push
        self.clock = clock
        self.host_ip = host_ip
        self.records = sorted((m for m in measurements if m.source == spec.hostname), key=lambda m: m.timestamp)
        self._pushed = 0
        self.pushes = 0
        self.push_denied = 0
        self.fetches = 0
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def add(self, m: Measurement) -> None:
        if m.source != self.hostname:
            raise ValueError(f"{m.source} measurement offered to {self.hostname}")
        with self._lock:
            if self.records and m.timestamp < self.records[-1].timestamp:
                raise ValueError("measurements must be added in time order")
            self.records.append(m)

    def fetch(self, test_type: str, since: float, now: float | None = None) -> list[dict]:
        if self.mode == "push":
            return []
        now = self.clock() if now is None else now
        with self._lock:
            self.fetches += 1
            snapshot = list(self.records)
        return [to_pull_record(m) for m in snapshot if m.test_type == test_type and since < m.timestamp <= now]

    def push_new(self, now: float | None = None) -> int:
        """Push every not-yet-pushed record with timestamp <= now."""
        if self.mode == "pull":
            return 0
        now = self.clock() if now is None else now
        n = 0
        with self._lock:
            while self._pushed < len(self.records) and self.records[self._pushed].timestamp <= now:
                m = self.records[self._pushed]
                self._pushed += 1
                if self.push(topic_for(m.test_type), encode(to_push_record(m, self.host_ip))):
                    n += 1
                else:
                    self.push_denied += 1
            self.pushes += n
        return n

    def run(self, step: float = 1.0) -> None:
        while not self._stop.is_set():
            self.push_new()
            self._stop.wait(step)

    def start(self, step: float = 1.0) -> "MockToolkit":
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, args=(step,), name=f"toolkit-{self.hostname}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None


def toolkit_fetcher(toolkits: dict[str, MockToolkit]):
    """In-process fetcher for Collector, bypassing HTTP."""

    def fetch(endpoint, test_type: str, since: float) -> list:
        return toolkits[endpoint.hostname].fetch(test_type, since)

    return fetch


def add_toolkit_routes(router, toolkits: dict[str, MockToolkit]) -> None:
    """GET /toolkit/{hostname}/measurements?type=&since= (mock esmond API)."""
    from .httpd import Response

    def measurements(req):
        tk = toolkits.get(req.params["hostname"])
        if tk is None:
            return Response.json({"error": "unknown toolkit"}, 404)
        try:
            since = float(req.query.get("since", "0"))
        except ValueError:
            return Response.json({"error": "bad since"}, 400)
        test_type = req.query.get("type", "")
        return Response.json(tk.fetch(test_type, since))

    router.add("GET", "/toolkit/{hostname}/measurements", measurements)
