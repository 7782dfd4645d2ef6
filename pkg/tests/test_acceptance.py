"""Acceptance criteria, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL`` line (also collected
into the terminal summary).
"""

import contextlib
import json
import random
import threading
import time
from fractions import Fraction

from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import EXAMPLE_EXP, EXAMPLE_SCOPE
from harness import T0, advance, open_pipeline, write_config
from oracles import brute_force_match, loss_fraction_oracle, parse_pt_seconds, record_id_oracle
from sandpipe import auth
from sandpipe.archive import UPLOADED, Archiver, count_entries, iter_entries, replay
from sandpipe.bus import Broker, LocalCredential, PublishDenied, match_topic
from sandpipe.cli import main
from sandpipe.clock import ManualClock
from sandpipe.collect import Collector, PushDetector, PushTransformer, ToolkitEndpoint, bus_publisher
from sandpipe.ingest import PERFSONAR, Ingester, enrich, loss_fraction, normalize
from sandpipe.pipeline import ARCHIVE_Q, PS_RAW, PUSH_RAW, build_bus_topology, ingest_queue
from sandpipe.records import Measurement, encode, parse_duration, to_pull_record, to_push_record, topic_for
from sandpipe.store import DocumentStore
from sandpipe.synth import BusPushClient, MockToolkit, SyntheticMesh, ToolkitSpec, toolkit_fetcher

RESULTS: list[str] = []


@contextlib.contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    notes: dict = {}
    try:
        yield notes
    except BaseException as e:
        line = f"ACCEPTANCE {n} FAIL: {title} ({type(e).__name__}: {str(e)[:200]})"
        RESULTS.append(line)
        print(line)
        raise
    extra = ", ".join(f"{k}={v}" for k, v in notes.items())
    line = f"ACCEPTANCE {n} PASS: {title} [{time.perf_counter() - t0:.1f}s{', ' + extra if extra else ''}]"
    RESULTS.append(line)
    print(line)


A = ToolkitSpec("ps-a.site-a.example.edu", "10.1.0.10", "SITE-A", mode="both")
B = ToolkitSpec("ps-b.site-b.example.edu", "10.1.1.10", "SITE-B")


def _mesh(scale=1e-3, **kw):
    return SyntheticMesh(seed=2021, toolkits=[A, B], scale=scale, **kw)


def _trusted_broker(stores=("unl",)):
    b = Broker(trusted={"test"})
    build_bus_topology(b, stores)
    return b


def test_1_dedup_end_to_end(broker, keypair):
    with criterion(1, "push+pull overlap of 1,000 measurements -> 1,000 documents, ids match oracle") as notes:
        t0 = time.perf_counter()
        mesh = _mesh()
        ms = [m for m in mesh.measurements(T0, T0 + 86400) if m.source == A.hostname][:1000]
        assert len(ms) == 1000
        reg = auth.ToolkitRegistry()
        reg.add(A.hostname, A.ip, EXAMPLE_SCOPE)
        token = auth.issue_token(A.hostname, A.ip, reg, EXAMPLE_EXP - 7200, keypair[0])
        tk = MockToolkit(A, ms, mesh.host_ip(), push=BusPushClient(broker, token), clock=lambda: T0 + 2 * 86400)
        assert tk.mode == "both"
        ep = ToolkitEndpoint(A.hostname, "")
        collector = Collector([ep], bus_publisher(broker, PS_RAW), fetcher=toolkit_fetcher({A.hostname: tk}))
        store = DocumentStore()
        ingester = Ingester(broker, ingest_queue("unl", PERFSONAR), store, mesh.topology())

        assert tk.push_new() == 1000
        assert collector.poll_toolkit(ep) == 1000
        assert PushTransformer(broker).drain() == 1000
        detector = PushDetector(broker, collector, mesh.topology())
        detector.drain()
        assert detector.detected == [A.hostname]
        assert ingester.drain() == 2000
        collector.shutdown()

        assert len(store) == 1000
        docs = store.snapshot()
        want = {record_id_oracle(m.timestamp, m.source, m.destination, m.test_type) for m in ms}
        assert set(docs) == want
        assert all(doc["id"] == i for i, doc in docs.items())
        # every measurement arrived twice (once per path) and was stored once
        assert all(store.get(i).version == 2 for i in docs)
        elapsed = time.perf_counter() - t0
        assert elapsed < 60
        notes["docs"] = len(store)


def _tap(broker, exchange=PS_RAW):
    broker.declare_queue("tap")
    broker.bind(exchange, "#", "tap")


def test_2_replay_fidelity(tmp_path):
    with criterion(2, "archive 10,000 -> wipe -> replay reproduces store; live traffic archived exactly") as notes:
        t_start = time.perf_counter()
        mesh = _mesh(scale=3e-3)
        ms = mesh.measurements(T0, T0 + 86400)[:10_100]
        seeded, live = ms[:10_000], ms[10_000:]
        assert len(live) == 100
        b = _trusted_broker()
        cred = LocalCredential("test")
        clock = ManualClock(T0 + 3600)
        archiver = Archiver(tmp_path / "spool", clock=clock)
        store = DocumentStore(tmp_path / "unl.jsonl")
        topo = mesh.topology()
        ingesters = [Ingester(b, ingest_queue("unl", PERFSONAR), store, topo) for _ in range(2)]

        for m in seeded:
            b.publish(None, PS_RAW, topic_for(m.test_type), encode(to_pull_record(m)), cred)
        assert archiver.drain(b) == 10_000
        ingesters[0].drain()
        assert len(store) == 10_000
        snap = store.snapshot()
        clock.set(T0 + 86400 + 60)
        (seg,) = archiver.rotate()
        assert seg.entry_count == 10_000 == count_entries(seg.path)
        store.wipe()
        assert len(store) == 0

        for ing in ingesters:
            ing.start()
        archiver.start(b)

        def live_traffic():
            for m in live:
                b.publish(None, PS_RAW, topic_for(m.test_type), encode(to_pull_record(m)), cred)

        feeder = threading.Thread(target=live_traffic)
        t0 = time.perf_counter()
        feeder.start()
        rep = replay([seg], b)
        feeder.join()
        deadline = time.time() + 60
        while len(store) < 10_100 and time.time() < deadline:
            time.sleep(0.01)
        end_to_end = time.perf_counter() - t0
        for ing in ingesters:
            ing.stop()
        archiver.stop()
        archiver.drain(b)
        for ing in ingesters:
            ing.drain()

        assert rep.records == 10_000 and rep.skipped == 0
        after = store.snapshot()
        live_ids = {record_id_oracle(m.timestamp, m.source, m.destination, m.test_type) for m in live}
        assert {k: v for k, v in after.items() if k not in live_ids} == snap
        assert set(after) == set(snap) | live_ids
        assert count_entries(seg.path) == 10_000  # replay did not re-archive
        assert archiver.current.entry_count == 100
        archiver.close()
        live_bodies = [e.body for e in iter_entries(archiver.current.path)]
        assert sorted(live_bodies) == sorted(encode(to_pull_record(m)) for m in live)
        assert b.queue_depth(ARCHIVE_Q) == 0
        rate = 10_000 / end_to_end
        assert rep.rate >= 1000, rep.rate
        assert rate >= 1000, rate
        assert time.perf_counter() - t_start < 120
        notes["publish_rate"] = f"{rep.rate:.0f}/s"
        notes["store_rate"] = f"{rate:.0f}/s"


TYPES = ["latency", "packet-loss", "throughput", "retransmits", "packet-trace", "x", "owamp1"]


def test_3_authorization_matrix(keypair, other_keypair, example_token):
    with criterion(3, "example token allow/deny table") as notes:
        pub = keypair[1]
        header, payload, sig = example_token.split(".")
        tampered = ".".join([header, payload, sig[:-4] + ("AAAA" if sig[-4:] != "AAAA" else "BBBB")])
        rows = []
        keys = [f"perfsonar.raw.{t}" for t in TYPES] + ["perfsonar.raw", "perfsonar.raw.a.b", "perfsonar.meta.x", "htcondor.raw.x", "perfsonar.raw.trace.extra"]
        for key in keys:
            for exchange in (PUSH_RAW, PS_RAW, "osg.ps-push.transformed", "amq.topic"):
                for vhost in ("osg-nma", "other"):
                    rows.append((example_token, "rabbit_server", EXAMPLE_EXP - 1, vhost, exchange, key, pub))
        for now in (EXAMPLE_EXP - 86400, EXAMPLE_EXP - 1, EXAMPLE_EXP, EXAMPLE_EXP + 1):
            rows.append((example_token, "rabbit_server", now, "osg-nma", PUSH_RAW, "perfsonar.raw.latency", pub))
        rows.append((example_token, "other_server", EXAMPLE_EXP - 1, "osg-nma", PUSH_RAW, "perfsonar.raw.latency", pub))
        rows.append((tampered, "rabbit_server", EXAMPLE_EXP - 1, "osg-nma", PUSH_RAW, "perfsonar.raw.latency", pub))
        rows.append((example_token, "rabbit_server", EXAMPLE_EXP - 1, "osg-nma", PUSH_RAW, "perfsonar.raw.latency", other_keypair[1]))

        def expected(token, server, now, vhost, exchange, key, key_used):
            if token != example_token or key_used != pub:
                return auth.BAD_SIGNATURE
            if now >= 1618444800:
                return auth.EXPIRED
            if server != "rabbit_server":
                return auth.WRONG_AUDIENCE
            ok = vhost == "osg-nma" and exchange == "osg.ps-push.raw" and brute_force_match("perfsonar.raw.*", key)
            return None if ok else auth.SCOPE_MISMATCH

        mismatches = []
        for row in rows:
            d = auth.verify_and_authorize(*row)
            want = expected(*row)
            got = None if d.allowed else d.reason
            if got != want:
                mismatches.append((row[1:6], want, got))
        assert mismatches == []
        # every perfsonar.raw.<word> key on the right exchange, plus two unexpired clock rows
        assert sum(1 for r in rows if expected(*r) is None) == len(TYPES) + 2
        assert {expected(*r) for r in rows} == {None, auth.BAD_SIGNATURE, auth.EXPIRED, auth.WRONG_AUDIENCE, auth.SCOPE_MISMATCH}

        # same table through the broker
        b = Broker(authorizer=auth.TokenAuthorizer(pub, clock=lambda: EXAMPLE_EXP - 1))
        build_bus_topology(b)
        for t in TYPES:
            b.publish("osg-nma", PUSH_RAW, f"perfsonar.raw.{t}", b"{}", example_token)
        for key in ("perfsonar.raw.a.b", "perfsonar.meta.x"):
            try:
                b.publish("osg-nma", PUSH_RAW, key, b"{}", example_token)
                raise AssertionError(f"{key} should be denied")
            except PublishDenied as e:
                assert e.reason == auth.SCOPE_MISMATCH
        assert b.queue_depth("osg.ps-push.collector") == len(TYPES)
        notes["rows"] = len(rows)


def test_4_normalization():
    with criterion(4, "PT0.0005S -> 0.0005; push and pull normalize equal over 10^4 measurements") as notes:
        assert parse_duration("PT0.0005S") == 0.0005
        assert parse_pt_seconds("PT0.0005S") == Fraction(5, 10_000)
        mesh = SyntheticMesh(seed=44, toolkits=[A, B, ToolkitSpec("ps-c.site-c.example.edu", "10.1.2.10", "SITE-C")], scale=2e-3)
        ms = mesh.measurements(T0, T0 + 86400)[:10_000]
        assert len(ms) == 10_000
        rng = random.Random(44)
        # durations other than the generator's fixed 20 s
        ms += [Measurement("throughput", T0 + i, A.hostname, B.hostname, {"throughput": 1, "duration": rng.uniform(0, 100), "streams": 1}) for i in range(500)]
        topo, ips = mesh.topology(), mesh.host_ip()
        types = set()
        for m in ms:
            a = normalize(to_push_record(m, ips), topo)
            b = normalize(to_pull_record(m), topo)
            assert a == b, m
            ea, eb = enrich(a, topo, 0.0), enrich(b, topo, 0.0)
            assert (ea.pop("origin"), eb.pop("origin")) == ("push", "pull")
            assert ea == eb
            types.add(m.test_type)
        assert types == {"latency", "packet-loss", "throughput", "retransmits", "trace"}
        notes["records"] = len(ms)


@settings(max_examples=2000, deadline=None)
@given(st.integers(1, 100_000).flatmap(lambda e: st.tuples(st.just(e), st.integers(0, e))))
def _loss_property(er):
    e, r = er
    f = loss_fraction(e, r)
    assert 0.0 <= f <= 1.0
    assert (f == 0.0) == (r == e)
    assert abs(Fraction(f) - loss_fraction_oracle(e, r)) <= Fraction(1, 2**52)


def test_5_loss_accounting():
    with criterion(5, "600 sent / 594 received -> loss 0.01 exactly; 0 <= loss <= 1, zero iff no loss"):
        assert loss_fraction(600, 594) == 0.01
        assert loss_fraction_oracle(600, 594) == Fraction(1, 100)
        m = Measurement("packet-loss", T0, A.hostname, B.hostname, {"expected": 600, "received": 594, "lost": 6})
        topo = _mesh().topology()
        assert enrich(normalize(to_pull_record(m), topo), topo, 0.0)["loss_fraction"] == 0.01
        _loss_property()


def test_6_bus_properties():
    with criterion(6, "FIFO 10^4, exact fanout, matcher vs brute force on 10^5 pairs, consumer downtime") as notes:
        b = Broker(trusted={"test"})
        cred = LocalCredential("test")
        b.declare_exchange(None, "x", "topic")
        b.declare_queue("q")
        b.bind("x", "a.#", "q")
        for i in range(10_000):
            b.publish(None, "x", "a.b", str(i).encode(), cred)
        got = []
        with b.consume("q", "c") as c:
            for d in c:
                got.append(int(d.message.payload))
                c.ack(d)
        assert got == list(range(10_000))

        b.declare_exchange(None, "f", "fanout")
        for i in range(7):
            b.declare_queue(f"fq{i}")
            b.bind("f", "#", f"fq{i}")
        for i in range(300):
            b.publish(None, "f", "k.x", b"m", cred)
        assert [b.queue_depth(f"fq{i}") for i in range(7)] == [300] * 7

        rng = random.Random(6)
        words = ["a", "b", "c", "perfsonar", "raw"]
        agree = 0
        for _ in range(100_000):
            pattern = ".".join(rng.choice(words + ["*", "#"]) for _ in range(rng.randint(1, 5)))
            key = ".".join(rng.choice(words) for _ in range(rng.randint(1, 6)))
            assert match_topic(pattern, key) == brute_force_match(pattern, key), (pattern, key)
            agree += 1

        bb = _trusted_broker()
        store = DocumentStore()
        mesh = _mesh()
        ing = Ingester(bb, ingest_queue("unl", PERFSONAR), store, mesh.topology()).start()
        ing.stop()
        ms = mesh.measurements(T0, T0 + 86400)[:500]
        for m in ms:
            bb.publish(None, PS_RAW, topic_for(m.test_type), encode(to_pull_record(m)), LocalCredential("test"))
        assert bb.queue_depth(ingest_queue("unl", PERFSONAR)) == 500 and len(store) == 0
        ing.start()
        deadline = time.time() + 30
        while len(store) < 500 and time.time() < deadline:
            time.sleep(0.01)
        ing.stop()
        assert len(store) == 500
        notes["match_pairs"] = agree


def test_7_rotation_two_midnights(tmp_path):
    with criterion(7, "two midnights -> two closed, compressed, uploaded, date-labelled segments") as notes:
        cfg = write_config(tmp_path, {"seed": 3, "n_toolkits": 3, "scale": 1e-4}, store={"instances": ["unl"]})
        pipe, clock = open_pipeline(cfg, start=T0 + 12 * 3600)
        _tap(pipe.broker)
        published: dict[str, list[bytes]] = {}
        t = clock()
        while t < T0 + 2 * 86400 + 12 * 3600:
            t += 1800
            clock.set(t)
            pipe.sweep()
            day = time.strftime("%Y-%m-%d", time.gmtime(t))
            with pipe.broker.consume("tap", "tap") as c:
                for d in c:
                    published.setdefault(day, []).append(d.message.payload)
                    c.ack(d)
            pipe.uploader.run_once(pipe.archiver.closed)
        closed = pipe.archiver.closed
        pipe.shutdown()
        assert [s.date.isoformat() for s in closed] == ["2021-04-14", "2021-04-15"]
        for seg in closed:
            assert seg.state == UPLOADED
            assert seg.path.name == f"sand-{seg.date.isoformat()}.tar.gz"
            assert seg.path.parent == tmp_path / "state" / "archive" / "tape"
            assert seg.path.read_bytes()[:2] == b"\x1f\x8b"
            bodies = [e.body for e in iter_entries(seg.path)]
            assert bodies == published[seg.date.isoformat()]
            assert seg.entry_count == len(bodies) > 0
        notes["entries"] = [s.entry_count for s in closed]


def test_8_scheduler():
    with criterion(8, "poll spacing 300-360 s, pool <= W, no polls after push detection") as notes:
        W = 3
        clock = ManualClock(T0)
        specs = [ToolkitSpec(f"ps{i}.example.edu", f"10.9.0.{i + 1}", f"S{i}") for i in range(10)]
        ips = {s.hostname: s.ip for s in specs}
        b = _trusted_broker()
        tks = {s.hostname: MockToolkit(s, [], ips, clock=clock) for s in specs}
        slow = toolkit_fetcher(tks)

        def fetch(ep, t, since):
            time.sleep(0.002)
            return slow(ep, t, since)

        eps = [ToolkitEndpoint(s.hostname, "") for s in specs]
        collector = Collector(eps, bus_publisher(b, PS_RAW), width=W, seed=8, fetcher=fetch, clock=clock)
        mesh = SyntheticMesh(seed=1, toolkits=specs)
        detector = PushDetector(b, collector, mesh.topology())
        detected_at = None
        end = T0 + 3600
        while True:
            nxt = collector.next_wakeup()
            if nxt is None or nxt > end:
                break
            clock.set(max(nxt, clock()))
            if detected_at is None and clock() >= T0 + 1200:
                m = Measurement("latency", clock(), specs[0].hostname, specs[1].hostname, {"expected": 600, "received": 600})
                b.publish(None, PUSH_RAW, "perfsonar.raw.latency", encode(to_push_record(m, ips)), LocalCredential("test"))
                PushTransformer(b).drain()
                detector.drain()
                detected_at = clock()
            collector.tick()
            collector.wait_idle()
        collector.shutdown()

        starts: dict[str, list[float]] = {}
        for host, t in collector.metrics.starts:
            starts.setdefault(host, []).append(t)
        assert detector.detected == [specs[0].hostname]
        after = [t for t in starts[specs[0].hostname] if t > detected_at]
        assert after == []
        gaps = []
        for s in specs[1:]:
            ts = starts[s.hostname]
            assert len(ts) >= 10
            gaps += [y - x for x, y in zip(ts, ts[1:])]
        assert all(300 <= g <= 360 for g in gaps), (min(gaps), max(gaps))
        assert collector.metrics.max_running <= W
        notes["gap_range"] = f"{min(gaps):.1f}-{max(gaps):.1f}s"
        notes["max_running"] = collector.metrics.max_running


def test_9_report_oracle(tmp_path, capsys):
    with criterion(9, "report counts equal generator ledger; silenced submit host listed") as notes:
        silent = "submit1.osg.example.org"
        mesh = {
            "seed": 9,
            "n_toolkits": 3,
            "scale": 1e-4,
            "submit_hosts": ["submit0.osg.example.org", silent, "submit2.osg.example.org"],
            "silent_after": {silent: T0 + 5 * 86400},
        }
        cfg = write_config(tmp_path, mesh, store={"instances": ["unl"]}, archive={"enabled": False})
        pipe, clock = open_pipeline(cfg)
        advance(pipe, clock, T0 + 14 * 86400, step=6 * 3600)
        pipe.shutdown()

        assert main(["report", "--config", str(cfg), "--window", "7d", "--json"]) == 0
        rep = json.loads(capsys.readouterr().out)
        lo, hi = rep["window"]["start"], rep["window"]["end"]
        want = pipe.mesh.ledger(lo, hi)
        assert {t: r["count"] for t, r in rep["types"].items()} == want
        assert rep["htcondor"]["stopped_reporting"] == [silent]
        assert set(rep["htcondor"]["hosts"]) == set(mesh["submit_hosts"])

        assert main(["report", "--config", str(cfg), "--window", "15d", "--json"]) == 0
        whole = json.loads(capsys.readouterr().out)
        assert {t: r["count"] for t, r in whole["types"].items()} == pipe.ledger()
        notes["records"] = whole["total"]["count"]
