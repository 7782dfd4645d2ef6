"""Wires the bus, auth, collectors, ingesters, archive and stores together."""

from __future__ import annotations

import json
import logging
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import auth
from .archive import Archiver, Uploader
from .bus import FANOUT, TOPIC, Broker, LocalCredential
from .clock import VirtualClock
from .collect import (
    Collector,
    CollectorState,
    HTCondorReceiver,
    PushDetector,
    PushTransformer,
    ToolkitEndpoint,
    XRootDReceiver,
    bus_publisher,
)
from .config import ConfigError, PipelineConfig
from .ingest import HTCONDOR, META, PERFSONAR, XROOTD, Ingester, SiteTopology
from .store import DocumentStore
from .synth import PRODUCTION_RATES, BusPushClient, MockToolkit, SyntheticMesh, toolkit_fetcher

logger = logging.getLogger(__name__)

VHOST = "osg-nma"
PUSH_RAW = "osg.ps-push.raw"
PUSH_TRANSFORMED = "osg.ps-push.transformed"
PS_RAW = "osg.ps.raw"
AMQ_TOPIC = "amq.topic"
REPLAY = "osg.ps.replay"

PUSH_COLLECTOR_Q = "osg.ps-push.collector"
PUSH_DETECT_Q = "osg.ps-push.detect"
ARCHIVE_Q = "osg.ps.archive"

# ingester kind -> amq.topic binding patterns
INGEST_BINDINGS = {
    PERFSONAR: ("perfsonar.raw.*",),
    HTCONDOR: ("htcondor.raw.#",),
    XROOTD: ("xrootd.raw.#",),
    META: ("perfsonar.meta.#",),
}


def ingest_queue(store: str, kind: str) -> str:
    return f"{store}.{kind}"


def build_bus_topology(
    broker: Broker,
    stores: tuple[str, ...] | list[str] = ("unl", "uc"),
    vhost: str = VHOST,
    alert_threshold: int | None = None,
    spill: bool = False,
) -> None:
    """Declare the exchanges, queues and bindings of the ingest path.

    Pushed data: osg.ps-push.raw -> collector queue -> transformer ->
    osg.ps-push.transformed -> osg.ps.raw (and the push-detect queue).
    Polled data enters at osg.ps.raw. osg.ps.raw fans out to the archive
    queue and amq.topic; osg.ps.replay feeds amq.topic only, so replayed
    messages never reach the archive again.
    """
    decl = broker.declare_exchange
    decl(vhost, PUSH_RAW, TOPIC, protected=True)
    decl(vhost, PUSH_TRANSFORMED, TOPIC)
    decl(vhost, PS_RAW, FANOUT, protected=True)
    decl(vhost, AMQ_TOPIC, TOPIC)
    decl(vhost, REPLAY, FANOUT)
    for q in (PUSH_COLLECTOR_Q, PUSH_DETECT_Q, ARCHIVE_Q):
        broker.declare_queue(q, alert_threshold, vhost=vhost, spill=spill)
    broker.bind(PUSH_RAW, "#", PUSH_COLLECTOR_Q, vhost)
    broker.bind(PUSH_TRANSFORMED, "#", PS_RAW, vhost)
    broker.bind(PUSH_TRANSFORMED, "#", PUSH_DETECT_Q, vhost)
    broker.bind(PS_RAW, "#", ARCHIVE_Q, vhost)
    broker.bind(PS_RAW, "#", AMQ_TOPIC, vhost)
    broker.bind(REPLAY, "#", AMQ_TOPIC, vhost)
    for store in stores:
        for kind, patterns in INGEST_BINDINGS.items():
            q = ingest_queue(store, kind)
            broker.declare_queue(q, alert_threshold, vhost=vhost, spill=spill)
            for p in patterns:
                broker.bind(AMQ_TOPIC, p, q, vhost)


def amq_publisher(broker: Broker, vhost: str = VHOST, name: str = "receiver"):
    broker.trusted.add(name)
    cred = LocalCredential(name)

    def publish(key: str, payload: bytes) -> bool:
        broker.publish(vhost, AMQ_TOPIC, key, payload, credential=cred)
        return True

    return publish


@dataclass
class SourceDriver:
    """Feeds the synthetic mesh into the pipeline as the clock advances.

    ``cursor`` is the start of the next ungenerated window; it and the
    running per-type ledger are persisted so a restart resumes seamlessly.
    """

    mesh: SyntheticMesh
    toolkits: dict[str, MockToolkit]
    htcondor: HTCondorReceiver
    xrootd: XRootDReceiver
    cursor: float
    clock: Callable[[], float]
    state_path: Path | None = None
    ledger: dict[str, int] = field(default_factory=lambda: dict.fromkeys(PRODUCTION_RATES, 0))

    def __post_init__(self):
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        if self.state_path is not None and self.state_path.exists():
            saved = json.loads(self.state_path.read_text())
            self.cursor = float(saved["cursor"])
            self.ledger = {k: int(v) for k, v in saved["ledger"].items()}

    def step(self, now: float | None = None) -> int:
        now = self.clock() if now is None else now
        with self._lock:
            if now <= self.cursor:
                return 0
            lo, hi = self.cursor, now
            n = 0
            for m in self.mesh.measurements(lo, hi):
                self.toolkits[m.source].add(m)
                self.ledger[m.test_type] = self.ledger.get(m.test_type, 0) + 1
                n += 1
            for host, line in self.mesh.htcondor_lines(lo, hi):
                self.htcondor.receive_htcondor_line(line, host)
                self.ledger["htcondor-xfer"] = self.ledger.get("htcondor-xfer", 0) + 1
                n += 1
            for dgram in self.mesh.xrootd_datagrams(lo, hi):
                self.xrootd.receive_xrootd_datagram(dgram)
                self.ledger["xrootd-tcp"] = self.ledger.get("xrootd-tcp", 0) + 1
                n += 1
            self.cursor = hi
            for tk in self.toolkits.values():
                tk.push_new(hi)
            self.save()
            return n

    def save(self) -> None:
        if self.state_path is None:
            return
        fd, tmp = tempfile.mkstemp(dir=self.state_path.parent, prefix=".driver.")
        with os.fdopen(fd, "w") as fh:
            json.dump({"cursor": self.cursor, "ledger": self.ledger}, fh, sort_keys=True)
        os.replace(tmp, self.state_path)

    def run(self, step: float) -> None:
        while not self._stop.is_set():
            self.step()
            self._stop.wait(step)

    def start(self, step: float = 0.05) -> "SourceDriver":
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, args=(step,), name="sources", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None


class Pipeline:
    """The whole ingest path in one process.

    ``start`` brings components up consumer-first; ``shutdown`` stops them
    source-first, then drains every queue so nothing is left unacked.
    """

    def __init__(self, cfg: PipelineConfig, clock: Callable[[], float] | None = None):
        self.cfg = cfg
        state = cfg.resolve(cfg.state_dir) or Path(tempfile.mkdtemp(prefix="sandpipe-"))
        self.state_dir = Path(state)
        self.state_dir.mkdir(parents=True, exist_ok=True)
        self.vhost = cfg.bus.vhost

        self.mesh = self._load_mesh()
        start = cfg.clock.start if cfg.clock.start is not None else cfg.mesh.start
        driver_state = self.state_dir / "driver.json"
        if driver_state.exists():
            # resume the simulated timeline where the last run stopped
            start = json.loads(driver_state.read_text())["cursor"]
        if clock is None:
            if cfg.clock.mode == "virtual":
                clock = VirtualClock(start, cfg.clock.speedup)
            else:
                clock = time.time
        self.clock = clock
        if start is None:
            start = clock()

        self.topology = self._load_topology()
        self._setup_auth()
        self.broker = Broker(
            authorizer=auth.TokenAuthorizer(self.public_key, cfg.auth.server_name, clock=clock),
            default_vhost=self.vhost,
            spill_dir=cfg.resolve(cfg.bus.spill_dir),
        )
        build_bus_topology(
            self.broker, tuple(cfg.store.instances), self.vhost, cfg.bus.alert_threshold, spill=cfg.bus.spill_dir is not None
        )

        store_dir = cfg.resolve(cfg.store.dir) or self.state_dir / "stores"
        self.stores = {
            name: DocumentStore(Path(store_dir) / f"{name}.jsonl", name=name, fsync=cfg.store.fsync) for name in cfg.store.instances
        }
        self.ingesters = [
            Ingester(self.broker, ingest_queue(name, kind), store, self.topology, kind, clock=clock, vhost=self.vhost)
            for name, store in self.stores.items()
            for kind in INGEST_BINDINGS
        ]

        self.archiver = None
        self.uploader = None
        if cfg.archive.enabled:
            spool = cfg.resolve(cfg.archive.spool) or self.state_dir / "archive" / "spool"
            dest = cfg.resolve(cfg.archive.destination) or self.state_dir / "archive" / "tape"
            Path(dest).mkdir(parents=True, exist_ok=True)
            self.archiver = Archiver(spool, clock=clock)
            self.uploader = Uploader(dest)

        self.transformer = PushTransformer(self.broker, vhost=self.vhost)

        # sources
        host_ip = self.mesh.host_ip() if self.mesh else {}
        self.toolkits: dict[str, MockToolkit] = {}
        self.config_service = auth.ConfigService(
            self.registry,
            self.private_key,
            mesh_config=self.mesh.mesh_config if self.mesh else None,
            server_name=cfg.auth.server_name,
            ttl=cfg.auth.ttl,
            clock=clock,
        )
        endpoints = []
        for spec in self.mesh.toolkits if self.mesh else []:
            push = None
            if spec.mode in ("push", "both"):
                def fetch_token(host=spec.hostname, ip=spec.ip):
                    return self.config_service.request(host, ip)["token"]

                push = BusPushClient(self.broker, fetch_token(), self.vhost, PUSH_RAW, refresh=fetch_token)
            self.toolkits[spec.hostname] = MockToolkit(spec, [], host_ip, push=push, clock=clock)
            endpoints.append(ToolkitEndpoint(spec.hostname, f"mock://{spec.hostname}"))
        coll_state = cfg.resolve(cfg.collector.state_dir) or self.state_dir / "collector"
        self.collector = Collector(
            endpoints,
            bus_publisher(self.broker, PS_RAW, self.vhost),
            CollectorState(coll_state),
            width=cfg.collector.width,
            interval=cfg.collector.interval,
            jitter=cfg.collector.jitter,
            seed=cfg.collector.seed,
            fetcher=toolkit_fetcher(self.toolkits),
            clock=clock,
        )
        self.detector = PushDetector(self.broker, self.collector, self.topology, vhost=self.vhost)
        submit = set(self.mesh.submit_hosts) if self.mesh else set()
        self.htcondor = HTCondorReceiver(amq_publisher(self.broker, self.vhost), submit, clock=clock)
        self.xrootd = XRootDReceiver(amq_publisher(self.broker, self.vhost))
        self.driver = None
        if self.mesh:
            self.driver = SourceDriver(
                self.mesh, self.toolkits, self.htcondor, self.xrootd, float(start), clock, driver_state
            )
        self._upload_stop = threading.Event()
        self._upload_thread: threading.Thread | None = None
        self.http = None
        self.started = False

    # setup helpers

    def _load_mesh(self) -> SyntheticMesh | None:
        m = self.cfg.mesh
        try:
            if m.inline is not None:
                return SyntheticMesh.from_config(m.inline)
            if m.path is not None:
                return SyntheticMesh.load(self.cfg.resolve(m.path))
        except (OSError, ValueError, TypeError) as e:
            raise ConfigError(f"mesh config: {e}") from None
        return None

    def _load_topology(self) -> SiteTopology:
        p = self.cfg.resolve(self.cfg.topology.path)
        if p is not None:
            try:
                return SiteTopology.load(p)
            except (OSError, ValueError) as e:
                raise ConfigError(f"topology file {p}: {e}") from None
        return self.mesh.topology() if self.mesh else SiteTopology()

    def _setup_auth(self) -> None:
        a = self.cfg.auth
        priv, pub = self.cfg.resolve(a.private_key), self.cfg.resolve(a.public_key)
        if priv is None or pub is None:
            keydir = self.state_dir / "keys"
            priv, pub = keydir / "signing.pem", keydir / "signing.pub.pem"
            if not priv.exists():
                keydir.mkdir(parents=True, exist_ok=True)
                auth.write_keypair(priv, pub)
        try:
            self.private_key = auth.load_key(priv)
            self.public_key = auth.load_key(pub)
        except OSError as e:
            raise ConfigError(f"auth key: {e}") from None
        reg = self.cfg.resolve(a.registry)
        if reg is not None:
            try:
                self.registry = auth.ToolkitRegistry.load(reg)
            except (OSError, ValueError, KeyError) as e:
                raise ConfigError(f"registry {reg}: {e}") from None
        else:
            self.registry = auth.ToolkitRegistry()
            for t in self.mesh.toolkits if self.mesh else []:
                scope = auth.Scope(a.server_name, "write", self.vhost, PUSH_RAW, "perfsonar.raw.*")
                self.registry.add(t.hostname, t.ip, scope)

    # lifecycle

    def start(self, step: float | None = None) -> "Pipeline":
        step = self.cfg.collector.step if step is None else step
        for ing in self.ingesters:
            ing.start()
        if self.archiver:
            self.archiver.start(self.broker, vhost=self.vhost)
            self._upload_thread = threading.Thread(target=self._upload_loop, name="uploader", daemon=True)
            self._upload_thread.start()
        self.transformer.start()
        self.detector.start()
        self.collector.start(step)
        if self.driver:
            self.driver.start(step)
        if self.cfg.http.port is not None:
            self._start_http()
        self.started = True
        return self

    def _start_http(self) -> None:
        from .bus import add_push_routes
        from .collect import add_metrics_routes
        from .httpd import HTTPService, Router
        from .store import add_store_routes
        from .synth import add_toolkit_routes

        router = Router()
        add_push_routes(router, self.broker)
        self.config_service.add_routes(router)
        add_store_routes(router, next(iter(self.stores.values())))
        add_metrics_routes(router, self.collector, lambda: {f"queue_depth_{k.replace('.', '_').replace('-', '_')}": q.depth for k, q in self.broker.queues(self.vhost).items()})
        add_toolkit_routes(router, self.toolkits)
        self.http = HTTPService(router, self.cfg.http.host, self.cfg.http.port).start()
        logger.info("http endpoints at %s", self.http.url)

    def _upload_loop(self) -> None:
        # the period is in simulated seconds; convert for waiting
        speed = getattr(self.clock, "speedup", 1.0)
        period = max(0.05, self.cfg.archive.upload_period / speed)
        while not self._upload_stop.wait(period):
            self.uploader.run_once(self.archiver.closed)

    def sweep(self) -> None:
        """Final pass: pull and push whatever the sources still hold, then
        drain every queue in topology order."""
        if self.driver:
            self.driver.step()
        for hostname, ep in self.collector.endpoints.items():
            st = self.collector.state.peek(hostname)
            if st is None or not st.push_detected:
                self.collector.poll_toolkit(ep)
        self.transformer.drain()
        self.detector.drain()
        if self.archiver:
            self.archiver.drain(self.broker, vhost=self.vhost)
        for ing in self.ingesters:
            ing.drain()

    def shutdown(self) -> None:
        if self.http:
            self.http.stop()
        if self.driver:
            self.driver.stop()
        self.collector.stop()
        self.transformer.stop()
        self.detector.stop()
        for ing in self.ingesters:
            ing.stop()
        if self.archiver:
            self._upload_stop.set()
            if self._upload_thread:
                self._upload_thread.join()
            self.archiver.stop()
        self.sweep()
        if self.archiver:
            self.archiver.close()
        self.collector.shutdown()
        for s in self.stores.values():
            s.close()
        self.broker.close()
        self.started = False

    def ledger(self) -> dict[str, int]:
        return dict(self.driver.ledger) if self.driver else {}
