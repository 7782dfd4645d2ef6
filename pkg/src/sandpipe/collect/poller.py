"""Polling collector, push transform and push detection."""

from __future__ import annotations

import json
import logging
import random
import threading
import time
import urllib.parse
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ..bus import Broker, LocalCredential, PublishDenied
from ..ingest.normalize import resolve_endpoint
from ..ingest.topology import SiteTopology
from ..records import decode, encode, topic_for
from .state import CollectorState, ToolkitEndpoint, schedule

logger = logging.getLogger(__name__)

POLL_INTERVAL = 300.0
POLL_JITTER = 60.0
PRODUCTION_WIDTH = 200
DEFAULT_WIDTH = 8

Fetcher = Callable[[ToolkitEndpoint, str, float], list]
Publisher = Callable[[str, bytes], bool]


def http_fetch(endpoint: ToolkitEndpoint, test_type: str, since: float, timeout: float = 30.0) -> list:
    qs = urllib.parse.urlencode({"type": test_type, "since": repr(since)})
    with urllib.request.urlopen(f"{endpoint.base_url.rstrip('/')}/measurements?{qs}", timeout=timeout) as resp:
        data = json.load(resp)
    if not isinstance(data, list):
        raise ValueError(f"{endpoint.hostname}: measurement listing is not an array")
    return data


def bus_publisher(broker: Broker, exchange: str = "osg.ps.raw", vhost: str | None = None, name: str = "ps-collector") -> Publisher:
    """Publisher that writes to ``exchange`` with a trusted local credential."""
    broker.trusted.add(name)
    cred = LocalCredential(name)

    def publish(key: str, payload: bytes) -> bool:
        try:
            broker.publish(vhost, exchange, key, payload, credential=cred)
        except PublishDenied as e:
            logger.warning("publish of %s denied: %s", key, e.reason)
            return False
        return True

    return publish


@dataclass
class PollMetrics:
    polls: int = 0
    failures: int = 0
    published: int = 0
    running: int = 0
    pending: int = 0
    max_running: int = 0
    durations: dict[str, float] = field(default_factory=dict)
    starts: list[tuple[str, float]] = field(default_factory=list)


class Collector:
    """Poll-based collector with a bounded worker pool.

    Each worker owns exactly one toolkit while it polls it. ``clock`` is the
    scheduling clock; pass a virtual clock to simulate hours in seconds.
    """

    def __init__(
        self,
        endpoints: Iterable[ToolkitEndpoint],
        publish: Publisher,
        state: CollectorState | None = None,
        width: int = DEFAULT_WIDTH,
        interval: float = POLL_INTERVAL,
        jitter: float = POLL_JITTER,
        seed: int | None = 0,
        fetcher: Fetcher = http_fetch,
        clock: Callable[[], float] = time.time,
    ):
        if width < 1:
            raise ValueError("worker pool width must be at least 1")
        self.endpoints = {e.hostname: e for e in endpoints}
        self.publish = publish
        self.state = state or CollectorState()
        self.width = width
        self.interval = interval
        self.jitter = jitter
        self.rng = random.Random(seed)
        self.fetcher = fetcher
        self.clock = clock
        self.metrics = PollMetrics()
        self._pool = ThreadPoolExecutor(max_workers=width, thread_name_prefix="poll")
        self._lock = threading.Lock()
        self._in_flight: set[str] = set()
        self._idle = threading.Condition(self._lock)
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # scheduling

    def due(self, now: float) -> list[ToolkitEndpoint]:
        with self._lock:
            busy = set(self._in_flight)
        return [e for e in schedule(self.endpoints.values(), self.state, now) if e.hostname not in busy]

    def tick(self, now: float | None = None) -> list[str]:
        """Dispatch every due toolkit to the pool; returns their hostnames."""
        now = self.clock() if now is None else now
        dispatched = []
        for ep in self.due(now):
            st = self.state.get(ep.hostname)
            st.next_poll_at = now + self.interval + self.rng.uniform(0.0, self.jitter)
            self.state.save(ep.hostname)
            with self._lock:
                self._in_flight.add(ep.hostname)
                self.metrics.pending += 1
                self.metrics.starts.append((ep.hostname, now))
            self._pool.submit(self._worker, ep)
            dispatched.append(ep.hostname)
        return dispatched

    def next_wakeup(self) -> float | None:
        times = [
            s.next_poll_at
            for h in self.endpoints
            if (s := self.state.peek(h)) is not None and s.next_poll_at is not None and not s.push_detected
        ]
        if any(self.state.peek(h) is None for h in self.endpoints):
            return 0.0
        return min(times) if times else None

    def _worker(self, ep: ToolkitEndpoint) -> None:
        with self._lock:
            self.metrics.pending -= 1
            self.metrics.running += 1
            self.metrics.max_running = max(self.metrics.max_running, self.metrics.running)
        t0 = time.monotonic()
        try:
            self.poll_toolkit(ep)
        except Exception:
            logger.exception("poll of %s crashed", ep.hostname)
        finally:
            with self._lock:
                self.metrics.running -= 1
                self.metrics.durations[ep.hostname] = time.monotonic() - t0
                self._in_flight.discard(ep.hostname)
                self._idle.notify_all()

    def wait_idle(self, timeout: float | None = None) -> bool:
        with self._lock:
            return self._idle.wait_for(lambda: not self._in_flight, timeout)

    # polling

    def poll_toolkit(self, ep: ToolkitEndpoint) -> int:
        """Fetch everything newer than the state mark and publish it.

        The mark only advances over records the bus accepted; on a partial
        failure it stops strictly below the first rejected timestamp so that
        nothing is skipped on the next poll.
        """
        st = self.state.get(ep.hostname)
        published = 0
        with self._lock:
            self.metrics.polls += 1
        for test_type in ep.test_types:
            since = st.last_collected.get(test_type, 0.0)
            try:
                records = self.fetcher(ep, test_type, since)
            except Exception as e:
                logger.warning("poll %s/%s failed: %s", ep.hostname, test_type, e)
                with self._lock:
                    self.metrics.failures += 1
                continue
            records = sorted((r for r in records if r.get("timestamp", 0) > since), key=lambda r: r["timestamp"])
            mark = since
            failed_at = None
            for rec in records:
                rec.setdefault("variant", "pull")
                if self.publish(topic_for(test_type), encode(rec)):
                    published += 1
                    mark = max(mark, rec["timestamp"])
                else:
                    failed_at = rec["timestamp"]
                    break
            if failed_at is not None:
                # sorted input: everything strictly below failed_at was accepted
                mark = max([since] + [r["timestamp"] for r in records if r["timestamp"] < failed_at])
            st.advance(test_type, mark)
            self.state.save(ep.hostname)
        with self._lock:
            self.metrics.published += published
        return published

    # push detection

    def mark_push(self, hostname: str) -> bool:
        if hostname not in self.endpoints:
            return False
        st = self.state.get(hostname)
        if st.push_detected:
            return False
        st.mark_push()
        self.state.save(hostname)
        logger.info("toolkit %s is pushing; polling stopped", hostname)
        return True

    # lifecycle

    def run(self, step: float = 1.0) -> None:
        while not self._stop.is_set():
            self.tick()
            self._stop.wait(step)

    def start(self, step: float = 1.0) -> "Collector":
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, args=(step,), name="collector", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None
        self.wait_idle(30.0)

    def shutdown(self) -> None:
        self.stop()
        self._pool.shutdown(wait=True)


class PushTransformer:
    """Moves pushed records from osg.ps-push.raw onto osg.ps-push.transformed.

    Records are checked to be JSON objects, tagged as pushed, and
    republished byte-for-byte; value normalization happens at ingest.
    """

    def __init__(
        self,
        broker: Broker,
        queue: str = "osg.ps-push.collector",
        exchange: str = "osg.ps-push.transformed",
        vhost: str | None = None,
        name: str = "ps-collector",
    ):
        self.broker = broker
        self.queue = queue
        self.exchange = exchange
        self.vhost = vhost
        broker.trusted.add(name)
        self.cred = LocalCredential(name)
        self.dlq = f"{queue}.dlq"
        broker.declare_queue(self.dlq, vhost=vhost)
        self.forwarded = 0
        self.rejected = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def handle(self, consumer, d) -> None:
        try:
            rec = decode(d.message.payload)
            if rec.get("variant") not in (None, "push"):
                raise ValueError(f"unexpected variant {rec.get('variant')!r}")
        except ValueError as e:
            self.rejected += 1
            self.broker.send_to_queue(self.dlq, d.message, vhost=self.vhost)
            logger.info("push record rejected: %s", e)
            consumer.ack(d)
            return
        headers = dict(d.message.headers, origin="push", pushed_by=d.message.publisher)
        self.broker.publish(self.vhost, self.exchange, d.message.topic, d.message.payload, credential=self.cred, headers=headers)
        self.forwarded += 1
        consumer.ack(d)

    def drain(self) -> int:
        n = 0
        with self.broker.consume(self.queue, "push-transform-drain", vhost=self.vhost) as c:
            for d in c:
                self.handle(c, d)
                n += 1
        return n

    def run(self) -> None:
        with self.broker.consume(self.queue, "push-transform", vhost=self.vhost) as c:
            while not self._stop.is_set():
                d = c.get(timeout=0.2)
                if d is not None:
                    self.handle(c, d)

    def start(self) -> "PushTransformer":
        self._thread = threading.Thread(target=self.run, name="push-transform", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


class PushDetector:
    """Watches the transformed push stream and stops polling pushing toolkits."""

    def __init__(
        self,
        broker: Broker,
        collector: Collector,
        topology: SiteTopology,
        queue: str = "osg.ps-push.detect",
        vhost: str | None = None,
    ):
        self.broker = broker
        self.collector = collector
        self.topology = topology
        self.queue = queue
        self.vhost = vhost
        self.detected: list[str] = []
        self.ignored = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def observe(self, payload: bytes) -> str | None:
        try:
            rec = decode(payload)
            source = rec["source"]
        except (ValueError, KeyError, TypeError):
            self.ignored += 1
            return None
        host, _ = resolve_endpoint(str(source), self.topology)
        if host is None or host not in self.collector.endpoints:
            self.ignored += 1
            return None
        if self.collector.mark_push(host):
            self.detected.append(host)
            return host
        return None

    def drain(self) -> int:
        n = 0
        with self.broker.consume(self.queue, "push-detect-drain", vhost=self.vhost) as c:
            for d in c:
                self.observe(d.message.payload)
                c.ack(d)
                n += 1
        return n

    def run(self) -> None:
        with self.broker.consume(self.queue, "push-detect", vhost=self.vhost) as c:
            while not self._stop.is_set():
                d = c.get(timeout=0.2)
                if d is not None:
                    self.observe(d.message.payload)
                    c.ack(d)

    def start(self) -> "PushDetector":
        self._thread = threading.Thread(target=self.run, name="push-detect", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()


def metrics_text(collector: Collector, extra: dict[str, float] | None = None) -> str:
    m = collector.metrics
    lines = [
        "# TYPE sandpipe_collector_running gauge",
        f"sandpipe_collector_running {m.running}",
        "# TYPE sandpipe_collector_pending gauge",
        f"sandpipe_collector_pending {m.pending}",
        "# TYPE sandpipe_collector_polls_total counter",
        f"sandpipe_collector_polls_total {m.polls}",
        "# TYPE sandpipe_collector_poll_failures_total counter",
        f"sandpipe_collector_poll_failures_total {m.failures}",
        "# TYPE sandpipe_collector_published_total counter",
        f"sandpipe_collector_published_total {m.published}",
        "# TYPE sandpipe_collector_poll_duration_seconds gauge",
    ]
    for host, secs in sorted(m.durations.items()):
        lines.append(f'sandpipe_collector_poll_duration_seconds{{toolkit="{host}"}} {secs:.6f}')
    pushing = sum(1 for s in collector.state if s.push_detected)
    lines += ["# TYPE sandpipe_collector_push_detected gauge", f"sandpipe_collector_push_detected {pushing}"]
    for k, v in sorted((extra or {}).items()):
        lines.append(f"sandpipe_{k} {v}")
    return "\n".join(lines) + "\n"


def add_metrics_routes(router, collector: Collector, extra: Callable[[], dict] | None = None) -> None:
    from ..httpd import Response

    router.add("GET", "/metrics", lambda req: Response.text(metrics_text(collector, extra() if extra else None)))
