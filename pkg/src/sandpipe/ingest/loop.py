from __future__ import annotations

import logging
import threading
import time
from typing import Callable

from ..bus import Broker, Delivery, Message
from ..records import decode
from ..store import DocumentStore
from .enrich import enrich, enrich_meta
from .htcondor import enrich_htcondor
from .normalize import RecordError, normalize
from .topology import SiteTopology

logger = logging.getLogger(__name__)

PERFSONAR = "perfsonar"
HTCONDOR = "htcondor"
XROOTD = "xrootd"
META = "meta"
KINDS = (PERFSONAR, HTCONDOR, XROOTD, META)


def xrootd_record(obj: dict) -> dict:
    """Map a TCP-statistics datagram onto the common raw-record shape."""
    try:
        stats = {k: v for k, v in obj.items() if k not in ("host", "peer", "timestamp", "kind")}
        return {
            "variant": "pull",
            "test_type": "xrootd-tcp",
            "timestamp": obj["timestamp"],
            "source": obj["host"],
            "destination": obj["peer"],
            "values": stats,
        }
    except KeyError as e:
        raise RecordError(f"xrootd datagram missing {e}") from None


def build_document(kind: str, msg: Message, topo: SiteTopology, clock: Callable[[], float] = time.time) -> dict:
    """Raw bus message -> enriched document. Raises RecordError on bad input."""
    try:
        obj = decode(msg.payload)
    except (ValueError, UnicodeDecodeError) as e:
        raise RecordError(f"payload is not a JSON object: {e}") from None
    now = clock()
    if kind == PERFSONAR:
        return enrich(normalize(obj, topo), topo, ingest_time=now)
    if kind == HTCONDOR:
        line, host = obj.get("line"), obj.get("host")
        if not isinstance(line, str) or not isinstance(host, str):
            raise RecordError("htcondor message needs line and host")
        return enrich_htcondor(line, host, topo, ingest_time=now)
    if kind == XROOTD:
        return enrich(normalize(xrootd_record(obj), topo), topo, ingest_time=now)
    if kind == META:
        return enrich_meta(obj, msg.topic, ingest_time=now)
    raise ValueError(f"unknown ingester kind {kind!r}")


class Ingester:
    """Consume -> normalize -> enrich -> upsert -> ack, one message at a time.

    Malformed records go to ``<queue>.dlq`` and are acked. A store failure
    leaves the message unacked so it is redelivered.
    """

    def __init__(
        self,
        broker: Broker,
        queue: str,
        store: DocumentStore,
        topo: SiteTopology,
        kind: str = PERFSONAR,
        name: str | None = None,
        clock: Callable[[], float] = time.time,
        vhost: str | None = None,
    ):
        if kind not in KINDS:
            raise ValueError(f"unknown ingester kind {kind!r}")
        self.broker = broker
        self.queue = queue
        self.store = store
        self.topo = topo
        self.kind = kind
        self.name = name or f"ingest-{queue}"
        self.clock = clock
        self.vhost = vhost
        self.dlq = f"{queue}.dlq"
        broker.declare_queue(self.dlq, vhost=vhost)
        self.stored = 0
        self.dead_lettered = 0
        self.failures = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._consumer = None

    def _dead_letter(self, d: Delivery, reason: str) -> None:
        headers = dict(d.message.headers, reason=reason, original_queue=self.queue)
        dead = Message(d.message.topic, d.message.payload, d.message.publisher, d.message.published_at, headers)
        self.broker.send_to_queue(self.dlq, dead, vhost=self.vhost)
        self.dead_lettered += 1
        logger.info("%s: dead-lettered message: %s", self.name, reason)

    def handle(self, consumer, d: Delivery) -> bool:
        try:
            doc = build_document(self.kind, d.message, self.topo, self.clock)
        except (RecordError, TypeError, KeyError, ValueError) as e:
            self._dead_letter(d, str(e) or type(e).__name__)
            consumer.ack(d)
            return True
        try:
            self.store.upsert(doc)
        except Exception:
            logger.exception("%s: store write failed, leaving message for redelivery", self.name)
            self.failures += 1
            consumer.nack(d, requeue=True)
            return False
        consumer.ack(d)
        self.stored += 1
        return True

    def drain(self, max_messages: int | None = None) -> int:
        """Process until the queue is empty (or ``max_messages``); returns count handled."""
        n = 0
        with self.broker.consume(self.queue, self.name + "-drain", vhost=self.vhost) as consumer:
            while max_messages is None or n < max_messages:
                d = consumer.get(timeout=0.0)
                if d is None:
                    break
                if not self.handle(consumer, d):
                    break
                n += 1
        return n

    def run(self, poll_timeout: float = 0.2) -> None:
        consumer = self.broker.consume(self.queue, self.name, vhost=self.vhost)
        self._consumer = consumer
        try:
            while not self._stop.is_set():
                d = consumer.get(timeout=poll_timeout)
                if d is None:
                    continue
                if not self.handle(consumer, d):
                    self._stop.wait(0.5)
        finally:
            consumer.close()

    def start(self) -> "Ingester":
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, name=self.name, daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float | None = 5.0) -> None:
        self._stop.set()
        self.broker.queue(self.queue, self.vhost).notify()
        if self._thread is not None:
            self._thread.join(timeout)
            self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()


def dead_letters(broker: Broker, queue: str, vhost: str | None = None) -> list[dict]:
    """Drain a dead-letter queue, returning reason, topic and payload of each entry."""
    out = []
    with broker.consume(f"{queue}.dlq", "dlq-reader", vhost=vhost) as c:
        for d in c:
            out.append({"reason": d.message.headers.get("reason"), "payload": d.message.payload, "topic": d.message.topic})
            c.ack(d)
    return out

