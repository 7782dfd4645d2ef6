"""In-process message broker: exchanges, queues, bindings and topic routing.

Topic keys are dot-separated words. Binding patterns use AMQP topic
wildcards: ``*`` matches exactly one word and ``#`` matches zero or more.
Delivery is at-least-once; a consumer that goes away without acking gets
its in-flight messages put back at the head of the queue, flagged as
redelivered.
"""

from __future__ import annotations

import base64
import collections
import itertools
import json
import logging
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Iterator, Mapping

logger = logging.getLogger(__name__)

TOPIC = "topic"
FANOUT = "fanout"
DEFAULT_VHOST = "osg-nma"


class BusError(Exception):
    pass


class ConfigurationError(BusError):
    pass


class UnknownEntity(BusError):
    pass


class PublishDenied(BusError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


def _words(s: str) -> list[str]:
    return s.split(".")


def validate_key(key: str) -> str:
    if not key:
        raise ValueError("empty topic key")
    for w in _words(key):
        if not w:
            raise ValueError(f"empty word in topic key {key!r}")
        if "*" in w or "#" in w:
            raise ValueError(f"wildcard in topic key {key!r}")
    return key


def validate_pattern(pattern: str) -> str:
    if not pattern:
        raise ValueError("empty binding pattern")
    for w in _words(pattern):
        if not w:
            raise ValueError(f"empty word in pattern {pattern!r}")
        if w not in ("*", "#") and ("*" in w or "#" in w):
            raise ValueError(f"wildcard must be a whole word in {pattern!r}")
    return pattern


@lru_cache(maxsize=4096)
def _compile(pattern: str) -> tuple[str, ...]:
    validate_pattern(pattern)
    # collapse runs of '#' which are equivalent to a single '#'
    out: list[str] = []
    for w in _words(pattern):
        if w == "#" and out and out[-1] == "#":
            continue
        out.append(w)
    return tuple(out)


def match_topic(pattern: str, key: str) -> bool:
    """True iff ``key`` matches ``pattern`` under AMQP topic semantics."""
    pat = _compile(pattern)
    words = _words(key)
    # reachable[j]: pattern prefix consumed so far can align with words[:j]
    reachable = [False] * (len(words) + 1)
    reachable[0] = True
    for p in pat:
        nxt = [False] * (len(words) + 1)
        if p == "#":
            seen = False
            for j in range(len(words) + 1):
                seen = seen or reachable[j]
                nxt[j] = seen
        else:
            for j in range(len(words)):
                if reachable[j] and (p == "*" or p == words[j]):
                    nxt[j + 1] = True
        reachable = nxt
        if not any(reachable):
            return False
    return reachable[len(words)]


_boot = uuid.uuid4().hex[:12]
_msg_seq = itertools.count(1)


def _next_msg_id() -> str:
    # unique across restarts so spill files never confuse old and new ids
    return f"{_boot}-{next(_msg_seq)}"


@dataclass(frozen=True)
class Message:
    topic: str
    payload: bytes
    publisher: str
    published_at: float
    headers: Mapping[str, str] = field(default_factory=dict)
    msg_id: str = field(default_factory=_next_msg_id)

    def to_json(self) -> dict:
        return {
            "topic": self.topic,
            "payload": base64.b64encode(self.payload).decode("ascii"),
            "publisher": self.publisher,
            "published_at": self.published_at,
            "headers": dict(self.headers),
            "msg_id": self.msg_id,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Message":
        return cls(
            topic=d["topic"],
            payload=base64.b64decode(d["payload"]),
            publisher=d["publisher"],
            published_at=d["published_at"],
            headers=d.get("headers", {}),
            msg_id=d["msg_id"],
        )


@dataclass(frozen=True)
class Delivery:
    message: Message
    queue: str
    tag: int
    consumer: str
    redelivered: bool = False


@dataclass(frozen=True)
class QueueAlert:
    queue: str
    depth: int
    threshold: int
    at: float


@dataclass(frozen=True)
class LocalCredential:
    """Identity of a trusted in-process producer (collector, replayer)."""

    name: str


class _Spill:
    """Append-only JSON-lines log of queue puts and acks."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "a", encoding="utf-8")

    def load(self) -> list[Message]:
        pending: dict[str, Message] = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("truncated spill record in %s", self.path)
                    break
                if rec["op"] == "put":
                    m = Message.from_json(rec["msg"])
                    pending[m.msg_id] = m
                else:
                    pending.pop(rec["id"], None)
        return list(pending.values())

    def put(self, msg: Message) -> None:
        self._fh.write(json.dumps({"op": "put", "msg": msg.to_json()}) + "\n")
        self._fh.flush()

    def ack(self, msg: Message) -> None:
        self._fh.write(json.dumps({"op": "ack", "id": msg.msg_id}) + "\n")
        self._fh.flush()

    def truncate(self) -> None:
        self._fh.close()
        self._fh = open(self.path, "w", encoding="utf-8")

    def close(self) -> None:
        self._fh.close()


class Queue:
    def __init__(
        self,
        name: str,
        depth_alert_threshold: int | None = None,
        spill_path: str | os.PathLike | None = None,
        on_alert: Callable[[QueueAlert], None] | None = None,
    ):
        self.name = name
        self.depth_alert_threshold = depth_alert_threshold
        self._ready: collections.deque[tuple[Message, bool]] = collections.deque()
        self._unacked: dict[int, tuple[str, Message]] = {}
        self._tags = itertools.count(1)
        self._cond = threading.Condition()
        self._alert_armed = True
        self._on_alert = on_alert
        self.alerts: list[QueueAlert] = []
        self.routed = 0
        self.acked = 0
        self._spill = _Spill(spill_path) if spill_path else None
        if self._spill is not None:
            recovered = self._spill.load()
            for m in recovered:
                self._ready.append((m, True))
            self.routed = len(recovered)

    @property
    def depth(self) -> int:
        with self._cond:
            return len(self._ready)

    @property
    def in_flight(self) -> int:
        with self._cond:
            return len(self._unacked)

    def put(self, msg: Message) -> None:
        alert = None
        with self._cond:
            if self._spill is not None:
                self._spill.put(msg)
            self._ready.append((msg, False))
            self.routed += 1
            alert = self._check_alert()
            self._cond.notify()
        if alert is not None:
            self._emit(alert)

    def _check_alert(self) -> QueueAlert | None:
        thr = self.depth_alert_threshold
        if thr is None:
            return None
        depth = len(self._ready)
        if depth > thr and self._alert_armed:
            self._alert_armed = False
            a = QueueAlert(self.name, depth, thr, time.time())
            self.alerts.append(a)
            return a
        if depth <= thr:
            self._alert_armed = True
        return None

    def _emit(self, alert: QueueAlert) -> None:
        logger.warning("queue %s depth %d over threshold %d", alert.queue, alert.depth, alert.threshold)
        if self._on_alert is not None:
            self._on_alert(alert)

    def get(self, consumer: str, timeout: float | None = 0.0) -> Delivery | None:
        with self._cond:
            if not self._ready:
                if timeout == 0.0:
                    return None
                self._cond.wait_for(lambda: bool(self._ready), timeout)
                if not self._ready:
                    return None
            msg, redelivered = self._ready.popleft()
            tag = next(self._tags)
            self._unacked[tag] = (consumer, msg)
            self._check_alert()
            return Delivery(msg, self.name, tag, consumer, redelivered)

    def ack(self, tag: int) -> None:
        with self._cond:
            entry = self._unacked.pop(tag, None)
            if entry is None:
                raise BusError(f"unknown delivery tag {tag} on {self.name}")
            self.acked += 1
            if self._spill is not None:
                self._spill.ack(entry[1])
                if not self._ready and not self._unacked:
                    self._spill.truncate()
            self._cond.notify_all()

    def nack(self, tag: int, requeue: bool = True) -> None:
        with self._cond:
            entry = self._unacked.pop(tag, None)
            if entry is None:
                raise BusError(f"unknown delivery tag {tag} on {self.name}")
            if requeue:
                self._ready.appendleft((entry[1], True))
                self._cond.notify()
            else:
                self.acked += 1
                if self._spill is not None:
                    self._spill.ack(entry[1])
                self._cond.notify_all()

    def release(self, consumer: str) -> int:
        """Return every unacked delivery held by ``consumer`` to the queue head."""
        with self._cond:
            tags = sorted(t for t, (c, _) in self._unacked.items() if c == consumer)
            for t in reversed(tags):
                _, msg = self._unacked.pop(t)
                self._ready.appendleft((msg, True))
            if tags:
                self._cond.notify_all()
            return len(tags)

    def purge(self) -> int:
        with self._cond:
            n = len(self._ready)
            for m, _ in self._ready:
                self.acked += 1
                if self._spill is not None:
                    self._spill.ack(m)
            self._ready.clear()
            self._alert_armed = True
            return n

    def wait_empty(self, timeout: float | None = None) -> bool:
        with self._cond:
            return self._cond.wait_for(lambda: not self._ready and not self._unacked, timeout)

    def notify(self) -> None:
        with self._cond:
            self._cond.notify_all()

    def close(self) -> None:
        if self._spill is not None:
            self._spill.close()


@dataclass(frozen=True)
class Binding:
    source: str
    pattern: str
    target: str
    target_is_exchange: bool


class Exchange:
    def __init__(self, name: str, kind: str, vhost: str, protected: bool = False):
        if kind not in (TOPIC, FANOUT):
            raise ConfigurationError(f"unknown exchange kind {kind!r}")
        self.name = name
        self.kind = kind
        self.vhost = vhost
        self.protected = protected
        self.bindings: list[Binding] = []
        self.published = 0

    def routes(self, key: str) -> Iterator[Binding]:
        for b in self.bindings:
            if self.kind == FANOUT or match_topic(b.pattern, key):
                yield b


class Consumer:
    """A named subscription to one queue. Closing it requeues unacked deliveries."""

    def __init__(self, broker: "Broker", queue: Queue, name: str):
        self._broker = broker
        self.queue = queue
        self.name = name
        self.closed = False

    def get(self, timeout: float | None = 0.0) -> Delivery | None:
        if self.closed:
            raise BusError(f"consumer {self.name} is closed")
        return self.queue.get(self.name, timeout)

    def __iter__(self) -> Iterator[Delivery]:
        while True:
            d = self.get(timeout=0.0)
            if d is None:
                return
            yield d

    def ack(self, delivery: Delivery) -> None:
        self.queue.ack(delivery.tag)

    def nack(self, delivery: Delivery, requeue: bool = True) -> None:
        self.queue.nack(delivery.tag, requeue)

    def close(self) -> int:
        if self.closed:
            return 0
        self.closed = True
        return self.queue.release(self.name)

    def __enter__(self) -> "Consumer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class _VHost:
    def __init__(self, name: str):
        self.name = name
        self.exchanges: dict[str, Exchange] = {}
        self.queues: dict[str, Queue] = {}


Authorizer = Callable[[str, str, str, str], "tuple[bool, str]"]


class Broker:
    """Thread-safe in-process broker.

    ``authorizer(token, vhost, exchange, key)`` decides token-bearing
    publishes and returns ``(allowed, reason)``. LocalCredential holders
    listed in ``trusted`` may publish anywhere.
    """

    def __init__(
        self,
        authorizer: Authorizer | None = None,
        trusted: set[str] | None = None,
        default_vhost: str = DEFAULT_VHOST,
        spill_dir: str | os.PathLike | None = None,
    ):
        self.authorizer = authorizer
        self.trusted = set(trusted or ())
        self.default_vhost = default_vhost
        self.spill_dir = Path(spill_dir) if spill_dir else None
        self._vhosts: dict[str, _VHost] = {}
        self._lock = threading.RLock()
        self._alert_listeners: list[Callable[[QueueAlert], None]] = []
        self.denied = 0

    def _vh(self, vhost: str | None, create: bool = False) -> _VHost:
        name = vhost or self.default_vhost
        vh = self._vhosts.get(name)
        if vh is None:
            if not create:
                raise UnknownEntity(f"unknown vhost {name!r}")
            vh = self._vhosts[name] = _VHost(name)
        return vh

    def on_alert(self, fn: Callable[[QueueAlert], None]) -> None:
        self._alert_listeners.append(fn)

    def _dispatch_alert(self, alert: QueueAlert) -> None:
        for fn in list(self._alert_listeners):
            fn(alert)

    def declare_exchange(self, vhost: str | None, name: str, kind: str = TOPIC, protected: bool = False) -> Exchange:
        with self._lock:
            vh = self._vh(vhost, create=True)
            ex = vh.exchanges.get(name)
            if ex is not None:
                if ex.kind != kind:
                    raise ConfigurationError(f"exchange {name!r} already declared as {ex.kind}")
                ex.protected = ex.protected or protected
                return ex
            ex = vh.exchanges[name] = Exchange(name, kind, vh.name, protected)
            return ex

    def declare_queue(
        self,
        name: str,
        depth_alert_threshold: int | None = None,
        vhost: str | None = None,
        spill: bool = False,
    ) -> Queue:
        with self._lock:
            vh = self._vh(vhost, create=True)
            q = vh.queues.get(name)
            if q is not None:
                if depth_alert_threshold is not None:
                    q.depth_alert_threshold = depth_alert_threshold
                return q
            spill_path = None
            if spill and self.spill_dir is not None:
                spill_path = self.spill_dir / vh.name / f"{name}.spill"
            q = vh.queues[name] = Queue(name, depth_alert_threshold, spill_path, self._dispatch_alert)
            return q

    def exchange(self, name: str, vhost: str | None = None) -> Exchange:
        ex = self._vh(vhost).exchanges.get(name)
        if ex is None:
            raise UnknownEntity(f"unknown exchange {name!r}")
        return ex

    def queue(self, name: str, vhost: str | None = None) -> Queue:
        q = self._vh(vhost).queues.get(name)
        if q is None:
            raise UnknownEntity(f"unknown queue {name!r}")
        return q

    def queues(self, vhost: str | None = None) -> dict[str, Queue]:
        return dict(self._vh(vhost).queues)

    def exchanges(self, vhost: str | None = None) -> dict[str, Exchange]:
        return dict(self._vh(vhost).exchanges)

    def bind(self, source: str, pattern: str, target: str, vhost: str | None = None) -> Binding:
        validate_pattern(pattern)
        with self._lock:
            vh = self._vh(vhost)
            src = vh.exchanges.get(source)
            if src is None:
                raise UnknownEntity(f"unknown source exchange {source!r}")
            if target in vh.queues:
                to_exchange = False
            elif target in vh.exchanges:
                to_exchange = True
                if self._reaches(vh, target, source):
                    raise ConfigurationError(f"binding {source} -> {target} would create a routing cycle")
            else:
                raise UnknownEntity(f"unknown bind target {target!r}")
            b = Binding(source, pattern, target, to_exchange)
            if b not in src.bindings:
                src.bindings.append(b)
            return b

    def unbind(self, source: str, pattern: str, target: str, vhost: str | None = None) -> None:
        with self._lock:
            src = self.exchange(source, vhost)
            src.bindings = [b for b in src.bindings if (b.pattern, b.target) != (pattern, target)]

    @staticmethod
    def _reaches(vh: _VHost, start: str, goal: str) -> bool:
        seen = set()
        stack = [start]
        while stack:
            name = stack.pop()
            if name == goal:
                return True
            if name in seen:
                continue
            seen.add(name)
            ex = vh.exchanges.get(name)
            if ex is not None:
                stack.extend(b.target for b in ex.bindings if b.target_is_exchange)
        return False

    def _check_credential(self, ex: Exchange, key: str, credential) -> str:
        if isinstance(credential, LocalCredential):
            if credential.name not in self.trusted:
                raise PublishDenied("untrusted-local-credential")
            return credential.name
        if credential is None:
            if ex.protected:
                raise PublishDenied("credential-required")
            return "anonymous"
        if self.authorizer is None:
            raise PublishDenied("no-authorizer")
        ok, reason = self.authorizer(credential, ex.vhost, ex.name, key)
        if not ok:
            raise PublishDenied(reason)
        return reason  # on allow the authorizer returns the token subject

    def publish(
        self,
        vhost: str | None,
        exchange: str,
        key: str,
        payload: bytes,
        credential=None,
        headers: Mapping[str, str] | None = None,
        now: float | None = None,
    ) -> Message:
        """Route one message. Raises PublishDenied or UnknownEntity."""
        validate_key(key)
        ex = self.exchange(exchange, vhost)
        try:
            publisher = self._check_credential(ex, key, credential)
        except PublishDenied:
            self.denied += 1
            raise
        msg = Message(
            topic=key,
            payload=bytes(payload),
            publisher=publisher,
            published_at=time.time() if now is None else now,
            headers=dict(headers or {}),
        )
        self.route(ex, msg)
        return msg

    def route(self, ex: Exchange, msg: Message) -> int:
        vh = self._vh(ex.vhost)
        delivered = 0
        visited = {ex.name}
        todo = [ex]
        targets: list[Queue] = []
        seen_queues: set[str] = set()
        while todo:
            cur = todo.pop(0)
            cur.published += 1
            for b in list(cur.routes(msg.topic)):
                if b.target_is_exchange:
                    if b.target not in visited:
                        visited.add(b.target)
                        todo.append(vh.exchanges[b.target])
                elif b.target not in seen_queues:
                    seen_queues.add(b.target)
                    targets.append(vh.queues[b.target])
        for q in targets:
            q.put(msg)
            delivered += 1
        return delivered

    def send_to_queue(self, queue: str, msg: Message, vhost: str | None = None) -> None:
        self.queue(queue, vhost).put(msg)

    def consume(self, queue: str, consumer: str, vhost: str | None = None) -> Consumer:
        return Consumer(self, self.queue(queue, vhost), consumer)

    def ack(self, delivery: Delivery, vhost: str | None = None) -> None:
        self.queue(delivery.queue, vhost).ack(delivery.tag)

    def queue_depth(self, queue: str, vhost: str | None = None) -> int:
        return self.queue(queue, vhost).depth

    def alerts(self, vhost: str | None = None) -> list[QueueAlert]:
        out: list[QueueAlert] = []
        for q in self._vh(vhost).queues.values():
            out.extend(q.alerts)
        return sorted(out, key=lambda a: a.at)

    def close(self) -> None:
        for vh in self._vhosts.values():
            for q in vh.queues.values():
                q.close()


def add_push_routes(router, broker: Broker) -> None:
    """POST /publish/{vhost}/{exchange}?key=<topic> with a bearer token."""
    from .httpd import Response

    def publish(req):
        key = req.query.get("key")
        if not key:
            return Response.json({"error": "missing key"}, 400)
        auth = req.headers.get("authorization", "")
        scheme, _, token = auth.partition(" ")
        if scheme.lower() != "bearer" or not token:
            return Response.json({"error": "bearer token required"}, 401)
        try:
            msg = broker.publish(req.params["vhost"], req.params["exchange"], key, req.body, credential=token.strip())
        except PublishDenied as e:
            return Response.json({"status": "denied", "reason": e.reason}, 403)
        except UnknownEntity as e:
            return Response.json({"error": str(e)}, 404)
        except ValueError as e:
            return Response.json({"error": str(e)}, 400)
        return Response.json({"status": "accepted", "msg_id": msg.msg_id})

    router.add("POST", "/publish/{vhost}/{exchange}", publish)
