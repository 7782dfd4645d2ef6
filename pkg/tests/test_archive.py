import datetime as dt
import gzip
import hashlib
import io
import tarfile

import pytest

from sandpipe.archive import (
    CLOSED,
    OPEN,
    UPLOADED,
    ArchiveFull,
    Archiver,
    Uploader,
    entry_name,
    find_segments,
    iter_entries,
    replay,
)
from sandpipe.bus import Broker, LocalCredential, Message
from sandpipe.clock import ManualClock

D1 = dt.datetime(2021, 4, 14, tzinfo=dt.timezone.utc).timestamp()


def msg(i, topic="perfsonar.raw.latency"):
    return Message(topic, f'{{"n":{i}}}'.encode(), "t", 0.0)


def test_entry_name_format():
    name = entry_name("perfsonar.raw.trace", b"abc", 1.5)
    assert name == f"perfsonar.raw.trace/1500000_{hashlib.sha256(b'abc').hexdigest()[:12]}"


def test_append_roundtrip_and_duplicates(tmp_path):
    clock = ManualClock(D1 + 10)
    a = Archiver(tmp_path, clock=clock)
    payloads = [msg(i).payload for i in range(1000)]
    for i in range(1000):
        a.append(msg(i))
    a.append(msg(0))  # same payload, same instant: still a distinct entry
    assert a.current.entry_count == 1001 and a.current.state == OPEN
    a.close()
    bodies = [e.body for e in iter_entries(a.current.path)]
    assert bodies[:1000] == payloads and bodies[1000] == payloads[0]
    names = [e.name for e in iter_entries(a.current.path)]
    assert len(set(names)) == 1001


def test_rotation_at_midnight(tmp_path):
    clock = ManualClock(D1 + 86400 - 60)  # 23:59
    a = Archiver(tmp_path, clock=clock)
    a.append(msg(1))
    clock.set(D1 + 86400 + 60)  # 00:01 next day
    closed = a.rotate()
    assert len(closed) == 1 and closed[0].date == dt.date(2021, 4, 14) and closed[0].state == CLOSED
    assert closed[0].path.name == "sand-2021-04-14.tar.gz"
    assert a.rotate() == []
    assert a.current.date == dt.date(2021, 4, 15)
    with gzip.open(closed[0].path) as fh:
        assert tarfile.open(fileobj=io.BytesIO(fh.read())).getnames()[0].startswith("perfsonar.raw.latency/")


def test_empty_days_still_rotate(tmp_path):
    clock = ManualClock(D1)
    a = Archiver(tmp_path, clock=clock)
    a.append(msg(1))
    clock.set(D1 + 3 * 86400 + 5)
    closed = a.rotate()
    assert [s.date.isoformat() for s in closed] == ["2021-04-14", "2021-04-15", "2021-04-16"]
    assert [s.entry_count for s in closed] == [1, 0, 0]
    assert sum(1 for _ in iter_entries(closed[1].path)) == 0


def test_rotation_partition(tmp_path):
    clock = ManualClock(D1)
    a = Archiver(tmp_path, clock=clock)
    times = [D1 + 5, D1 + 86399, D1 + 86400, D1 + 2 * 86400 - 1, D1 + 2 * 86400 + 1]
    for i, t in enumerate(times):
        clock.set(t)
        a.append(msg(i))
    assert a.rotate() == []  # append already rolled over at each midnight
    assert [(s.date.isoformat(), s.entry_count) for s in a.closed] == [("2021-04-14", 2), ("2021-04-15", 2)]
    assert a.current.entry_count == 1


def test_upload_retries_until_destination_appears(tmp_path):
    clock = ManualClock(D1)
    a = Archiver(tmp_path / "spool", clock=clock)
    a.append(msg(1))
    clock.set(D1 + 86400)
    seg = a.rotate()[0]
    digest = hashlib.sha256(seg.path.read_bytes()).hexdigest()
    dest = tmp_path / "tape"
    up = Uploader(dest)
    assert up.run_once(a.closed) == 0  # period 1: offline
    assert up.run_once(a.closed) == 0  # period 2: offline
    assert seg.state == CLOSED and seg.path.exists()
    dest.mkdir()
    assert up.run_once(a.closed) == 1  # period 3
    assert seg.state == UPLOADED and seg.path.parent == dest
    assert hashlib.sha256(seg.path.read_bytes()).hexdigest() == digest
    assert not (tmp_path / "spool" / seg.path.name).exists()
    assert up.upload(seg) is True  # idempotent
    assert up.run_once(a.closed) == 0
    assert find_segments([dest]) == [seg.path]
    with pytest.raises(ValueError):
        up.upload(a.current)


def test_replay_publishes_and_skips_corrupt(tmp_path):
    clock = ManualClock(D1)
    a = Archiver(tmp_path, clock=clock)
    for i in range(20):
        a.append(msg(i, "perfsonar.raw.trace" if i % 2 else "perfsonar.raw.latency"))
    clock.set(D1 + 86400)
    seg = a.rotate()[0]
    # a second segment with a bad topic entry and a truncated tail
    bad = tmp_path / "sand-2021-04-20.tar.gz"
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tf:
        for name, body in (("perfsonar.raw.latency/1_aaa", b"{}"), ("no-topic", b"x"), ("bad..topic/1_x", b"x")):
            info = tarfile.TarInfo(name)
            info.size = len(body)
            tf.addfile(info, io.BytesIO(body))
    bad.write_bytes(gzip.compress(buf.getvalue()[:-1500]))

    b = Broker(trusted=set())
    b.declare_exchange(None, "osg.ps.replay", "fanout")
    b.declare_queue("q")
    b.bind("osg.ps.replay", "#", "q")
    rep = replay([seg.path, bad], b)
    assert rep.records == 21 and rep.skipped >= 2
    with b.consume("q", "c") as c:
        got = [(d.message.topic, d.message.payload) for d in c]
    assert got[:20] == [("perfsonar.raw.trace" if i % 2 else "perfsonar.raw.latency", msg(i).payload) for i in range(20)]
    assert a.closed[0].entry_count == 20


def test_replay_rate_limit(tmp_path):
    clock = ManualClock(D1)
    a = Archiver(tmp_path, clock=clock)
    for i in range(30):
        a.append(msg(i))
    clock.set(D1 + 86400)
    seg = a.rotate()[0]
    b = Broker()
    b.declare_exchange(None, "osg.ps.replay", "fanout")
    rep = replay([seg], b, rate=300)
    assert rep.records == 30 and rep.duration >= 29 / 300 * 0.9


def test_restart_recovers_torn_segment(tmp_path):
    clock = ManualClock(D1)
    a = Archiver(tmp_path, clock=clock)
    for i in range(5):
        a.append(msg(i))
    a.close()
    path = a.current.path
    raw = path.read_bytes()
    path.write_bytes(raw + b"garbage-partial-header")
    a2 = Archiver(tmp_path, clock=clock)
    assert a2.current.entry_count == 5
    a2.append(msg(99))
    a2.close()
    assert [e.body for e in iter_entries(path)] == [msg(i).payload for i in list(range(5)) + [99]]


def test_write_failure_leaves_message_on_queue(tmp_path):
    b = Broker(trusted={"t"})
    b.declare_exchange(None, "osg.ps.raw", "fanout")
    b.declare_queue("osg.ps.archive")
    b.bind("osg.ps.raw", "#", "osg.ps.archive")
    a = Archiver(tmp_path, clock=ManualClock(D1))
    a.append(msg(0))
    b.publish(None, "osg.ps.raw", "perfsonar.raw.latency", b"payload", LocalCredential("t"))

    real = a._fh.write

    def full(data):
        raise OSError(28, "No space left on device")

    a._fh.write = full
    assert a.drain(b) == 0
    assert b.queue_depth("osg.ps.archive") == 1 and a.current.entry_count == 1
    a._fh.write = real
    assert a.drain(b) == 1
    a.close()
    assert [e.body for e in iter_entries(a.current.path)] == [msg(0).payload, b"payload"]
    with pytest.raises(ArchiveFull):
        a2 = Archiver(tmp_path / "x", clock=ManualClock(D1))
        a2.append(msg(0))
        a2._fh.write = full
        a2.append(msg(1))
