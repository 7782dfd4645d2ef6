import hashlib
import json
import statistics
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import loss_fraction_oracle, parse_pt_seconds, record_id_oracle
from sandpipe.bus import Broker, LocalCredential
from sandpipe.ingest import (
    HTCONDOR,
    META,
    XROOTD,
    Ingester,
    RecordError,
    SiteTopology,
    dead_letters,
    domain_of,
    enrich,
    enrich_htcondor,
    flatten,
    loss_fraction,
    normalize,
    record_id,
)
from sandpipe.records import (
    Measurement,
    encode,
    format_duration,
    is_duration,
    parse_duration,
    to_pull_record,
    to_push_record,
    topic_for,
    type_for_topic,
)
from sandpipe.store import DocumentStore

TOPO = SiteTopology(
    host_to_site={"a.example.edu": {"site": "A", "vo": "cms"}, "b.example.edu": {"site": "B", "vo": "atlas"}},
    ip_to_host={"192.0.2.1": "a.example.edu", "192.0.2.2": "b.example.edu", "198.51.100.7": "r1.net.example"},
    ip_to_asn={"192.0.2.1": 65001, "192.0.2.2": 65002, "198.51.100.7": 65100},
    ip_to_geo={"192.0.2.2": {"lat": 40.8, "lon": -96.7}},
)
HOST_IP = {"a.example.edu": "192.0.2.1", "b.example.edu": "192.0.2.2"}


def test_duration_examples():
    assert parse_duration("PT0.0005S") == 0.0005
    assert parse_duration("PT1M30S") == 90.0
    assert parse_duration("P1DT1H") == 90000.0
    assert parse_duration("-PT2S") == -2.0
    assert format_duration(0.0005) == "PT0.0005S"
    assert format_duration(20.0) == "PT20.0S"
    assert format_duration(1e-7) == "PT0.0000001S"
    for bad in ("P", "PT", "PT5", "5S", "PTS", "PASS"):
        assert not is_duration(bad)
        with pytest.raises(ValueError):
            parse_duration(bad)


@settings(max_examples=300)
@given(st.floats(min_value=0, max_value=1e6, allow_nan=False, allow_infinity=False))
def test_duration_roundtrip_exact(x):
    s = format_duration(x)
    assert parse_duration(s) == x
    # the decimal is the shortest one that rounds back to x
    assert float(parse_pt_seconds(s)) == x


def test_topics():
    assert topic_for("trace") == "perfsonar.raw.packet-trace"
    assert topic_for("latency") == "perfsonar.raw.latency"
    assert type_for_topic("perfsonar.raw.packet-trace") == "trace"
    assert type_for_topic("htcondor.raw.xfer") is None


def latency(ts=1618400000.123, received=594, delays=((0.0005, 300), (0.00051, 294))):
    return Measurement(
        "latency", ts, "a.example.edu", "b.example.edu",
        {"expected": 600, "received": received, "rtt": 0.00102, "delays": [list(d) for d in delays]},
    )


def test_push_and_pull_normalize_equal():
    m = latency()
    push = to_push_record(m, HOST_IP)
    assert push["source"] == "192.0.2.1" and push["values"]["delays"][0][0] == "PT0.0005S"
    a = normalize(to_pull_record(m), TOPO)
    b = normalize(json.loads(encode(push)), TOPO)
    assert a == b and a.origin == "pull" and b.origin == "push"
    assert record_id(a) == record_id(b) == record_id_oracle(m.timestamp, "a.example.edu", "b.example.edu", "latency")


def test_loss_fraction_exact():
    assert loss_fraction(600, 594) == 0.01
    assert loss_fraction(600, 600) == 0.0
    assert loss_fraction(600, 0) == 1.0
    with pytest.raises(RecordError):
        loss_fraction(600, 601)
    with pytest.raises(RecordError):
        loss_fraction(0, 0)


@given(st.integers(1, 10_000).flatmap(lambda e: st.tuples(st.just(e), st.integers(0, e))))
def test_loss_fraction_property(er):
    e, r = er
    f = loss_fraction(e, r)
    assert 0.0 <= f <= 1.0
    assert (f == 0.0) == (r == e)
    assert abs(Fraction(f) - loss_fraction_oracle(e, r)) <= Fraction(1, 2**52)


def test_latency_enrichment():
    doc = enrich(normalize(to_pull_record(latency()), TOPO), TOPO, ingest_time=1.0)
    samples = [0.0005] * 300 + [0.00051] * 294
    assert doc["loss_fraction"] == 0.01
    assert doc["delay_min"] == 0.0005 and doc["delay_max"] == 0.00051
    assert doc["delay_median"] == statistics.median(samples)
    assert doc["delay_mean"] == pytest.approx(sum(samples) / len(samples), rel=1e-15)
    assert doc["delay_hist_1_s"] == 0.00051 and doc["delay_hist_1_n"] == 294
    assert doc["source_site"] == "A" and doc["dest_vo"] == "atlas"
    assert doc["source_ip"] == "192.0.2.1" and doc["dest_host"] == "b.example.edu"


def test_trace_annotation():
    hops = [{"ttl": 1, "ip": "198.51.100.7", "rtt": 0.001}, {"ttl": 2, "ip": "203.0.113.9", "rtt": 0.002}, {"ttl": 3, "ip": "192.0.2.2", "rtt": 0.003}]
    m = Measurement("trace", 10.0, "a.example.edu", "b.example.edu", {"hops": hops})
    doc = enrich(normalize(to_push_record(m, HOST_IP), TOPO), TOPO)
    assert doc["hop_count"] == 3 and doc["destination_reached"] is True
    assert doc["hop_1_asn"] == 65100 and doc["hop_1_hostname"] == "r1.net.example"
    assert "hop_2_asn" not in doc and doc["hop_2_ip"] == "203.0.113.9"
    assert doc["hop_3_rtt"] == 0.003
    short = Measurement("trace", 10.0, "a.example.edu", "b.example.edu", {"hops": hops[:2]})
    assert enrich(normalize(to_pull_record(short), TOPO), TOPO)["destination_reached"] is False
    bad = Measurement("trace", 10.0, "a.example.edu", "b.example.edu", {"hops": [hops[1], hops[0]]})
    with pytest.raises(RecordError):
        enrich(normalize(to_pull_record(bad), TOPO), TOPO)


def test_throughput_flattened():
    m = Measurement("throughput", 5.0, "a.example.edu", "b.example.edu", {"throughput": 9e9, "duration": 20.0, "extra": {"x": [1, 2]}})
    doc = enrich(normalize(to_push_record(m, HOST_IP), TOPO), TOPO)
    assert doc["duration"] == 20.0 and doc["extra_x_0"] == 1 and doc["extra_x_1"] == 2


def test_flatten():
    assert flatten({"a": {"b": 1}, "c": [{"d": 2}, 3], "e": [[4, 5]]}) == {"a_b": 1, "c_0_d": 2, "c_1": 3, "e_0_0": 4, "e_0_1": 5}


@pytest.mark.parametrize(
    "raw",
    [
        {"test_type": "latency", "timestamp": 1, "source": "a", "destination": "b", "values": {}},
        {"variant": "pull", "test_type": "bogus", "timestamp": 1, "source": "a", "destination": "b", "values": {}},
        {"variant": "pull", "test_type": "latency", "timestamp": "x", "source": "a", "destination": "b", "values": {}},
        {"variant": "pull", "test_type": "latency", "timestamp": 1, "source": "", "destination": "b", "values": {}},
        {"variant": "push", "test_type": "latency", "timestamp": 1, "source": "a", "destination": "b", "values": {"rtt": "PTxS"}},
    ],
)
def test_normalize_rejects(raw):
    with pytest.raises(RecordError):
        normalize(raw, TOPO)


def test_string_values_that_look_like_words_are_kept():
    raw = {"variant": "pull", "test_type": "throughput", "timestamp": 1, "source": "a", "destination": "b", "values": {"status": "PASS"}}
    assert normalize(raw, TOPO).values["status"] == "PASS"


LINE = "2021-04-14 12:00:05.120 Peer=192.0.2.2 JobId=12.0 BytesSent=0 BytesRecvd=1048576 SegmentsLost=3 RTT=0.05 Transport=tcp"


def test_htcondor_enrichment():
    doc = enrich_htcondor(LINE, "submit1.example.org", TOPO, ingest_time=0.0)
    assert doc["direction"] == "download"
    assert doc["timestamp"] == 1618401605.12
    assert doc["BytesRecvd"] == 1048576 and doc["RTT"] == 0.05 and doc["Transport"] == "tcp"
    assert doc["dest_lat"] == 40.8 and doc["dest_lon"] == -96.7
    assert doc["dest_host"] == "b.example.edu" and doc["dest_domain"] == "example.edu"
    assert doc["id"] == hashlib.sha256(f"{LINE}|submit1.example.org".encode()).hexdigest()
    assert doc["message"] == LINE
    up = enrich_htcondor(LINE.replace("BytesSent=0", "BytesSent=5"), "s", TOPO)
    assert up["direction"] == "upload"
    for bad in ("2021-04-14", "garbage here Key=1", "2021-04-14 12:00:05 notkv"):
        with pytest.raises(RecordError):
            enrich_htcondor(bad, "s", TOPO)
    assert domain_of("host") is None


def _ingest_setup(kind="perfsonar"):
    b = Broker(trusted={"t"})
    b.declare_exchange(None, "amq.topic", "topic")
    b.declare_queue("q")
    b.bind("amq.topic", "#", "q")
    store = DocumentStore()
    return b, store, Ingester(b, "q", store, TOPO, kind)


def test_ingester_stores_and_dead_letters():
    b, store, ing = _ingest_setup()
    t = LocalCredential("t")
    m = latency()
    b.publish(None, "amq.topic", topic_for("latency"), encode(to_pull_record(m)), t)
    b.publish(None, "amq.topic", topic_for("latency"), encode(to_push_record(m, HOST_IP)), t)
    b.publish(None, "amq.topic", "perfsonar.raw.latency", b"not json", t)
    b.publish(None, "amq.topic", "perfsonar.raw.latency", b'{"variant":"pull"}', t)
    assert ing.drain() == 4
    assert len(store) == 1 and ing.stored == 2 and ing.dead_lettered == 2
    doc = store.get(record_id_oracle(m.timestamp, "a.example.edu", "b.example.edu", "latency"))
    assert doc.version == 2 and doc.document["origin"] == "push"
    dl = dead_letters(b, "q")
    assert len(dl) == 2 and all(d["reason"] for d in dl)
    assert b.queue("q").depth == 0 and b.queue("q").in_flight == 0


def test_ingester_store_failure_redelivers():
    b, store, ing = _ingest_setup()
    calls = {"n": 0}
    real = store.upsert

    def flaky(doc):
        calls["n"] += 1
        if calls["n"] == 1:
            raise OSError("disk full")
        return real(doc)

    store.upsert = flaky
    b.publish(None, "amq.topic", "perfsonar.raw.latency", encode(to_pull_record(latency())), LocalCredential("t"))
    assert ing.drain() == 0 and ing.failures == 1 and len(store) == 0
    assert b.queue_depth("q") == 1
    assert ing.drain() == 1 and len(store) == 1


def test_ingester_other_kinds():
    for kind, topic, body, ttype in [
        (HTCONDOR, "htcondor.raw.xfer", encode({"line": LINE, "host": "s1", "received_at": 0}), "htcondor-xfer"),
        (XROOTD, "xrootd.raw.tcp", encode({"host": "a.example.edu", "peer": "192.0.2.2", "timestamp": 7.0, "tcpi_rtt": 5}), "xrootd-tcp"),
        (META, "perfsonar.meta.host", encode({"host": "a", "version": "4.4"}), "meta.host"),
    ]:
        b, store, ing = _ingest_setup(kind)
        b.publish(None, "amq.topic", topic, body, LocalCredential("t"))
        b.publish(None, "amq.topic", topic, body, LocalCredential("t"))
        ing.drain()
        assert len(store) == 1, kind
        assert next(iter(store.documents()))["test_type"] == ttype


def test_ingester_thread_lifecycle():
    b, store, ing = _ingest_setup()
    ing.start()
    for i in range(50):
        b.publish(None, "amq.topic", "perfsonar.raw.latency", encode(to_pull_record(latency(ts=100.0 + i))), LocalCredential("t"))
    assert b.queue("q").wait_empty(5)
    ing.stop()
    assert not ing.running and len(store) == 50
