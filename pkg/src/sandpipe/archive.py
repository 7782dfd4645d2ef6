"""Raw-message archive: one tar per UTC day, gzipped on close, moved to a
"tape" directory by a separate uploader, and replayable through the bus.

Each message becomes one tar member named ``<topic>/<epoch_micros>_<sha12>``
whose body is the exact payload bytes.
"""

from __future__ import annotations

import datetime as dt
import gzip
import hashlib
import io
import logging
import os
import shutil
import tarfile
import threading
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .bus import Broker, LocalCredential, Message, validate_key

logger = logging.getLogger(__name__)

OPEN = "open"
CLOSED = "closed"
UPLOADED = "uploaded"

PREFIX = "sand-"


def utc_date(ts: float) -> dt.date:
    return dt.datetime.fromtimestamp(ts, dt.timezone.utc).date()


def segment_stem(day: dt.date) -> str:
    return f"{PREFIX}{day.isoformat()}"


def entry_name(topic: str, payload: bytes, written_at: float) -> str:
    micros = int(round(written_at * 1_000_000))
    return f"{topic}/{micros}_{hashlib.sha256(payload).hexdigest()[:12]}"


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ArchiveSegment:
    date: dt.date
    path: Path
    entry_count: int = 0
    state: str = OPEN


@dataclass(frozen=True)
class ArchiveEntry:
    name: str
    topic: str
    body: bytes


class ArchiveFull(OSError):
    pass


class Archiver:
    """Appends messages to the open daily segment and rotates at midnight UTC."""

    def __init__(
        self,
        spool_dir: str | os.PathLike,
        clock: Callable[[], float] = time.time,
        fsync: bool = False,
    ):
        self.spool = Path(spool_dir)
        self.spool.mkdir(parents=True, exist_ok=True)
        self.clock = clock
        self.fsync = fsync
        self.closed: list[ArchiveSegment] = []
        self.current: ArchiveSegment | None = None
        self._tar: tarfile.TarFile | None = None
        self._fh = None
        self._names: set[str] = set()
        self._lock = threading.RLock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._discover()

    # segment lifecycle

    def _discover(self) -> None:
        for p in sorted(self.spool.glob(f"{PREFIX}*.tar.gz")):
            day = dt.date.fromisoformat(p.name[len(PREFIX):-len(".tar.gz")])
            self.closed.append(ArchiveSegment(day, p, count_entries(p), CLOSED))
        opens = sorted(self.spool.glob(f"{PREFIX}*.tar"))
        for p in opens[:-1]:
            # stale open segments from an earlier crash: close them now
            day = dt.date.fromisoformat(p.name[len(PREFIX):-len(".tar")])
            self._open(day)
            self._close_current()
        if opens:
            day = dt.date.fromisoformat(opens[-1].name[len(PREFIX):-len(".tar")])
            self._open(day)

    def _open(self, day: dt.date) -> None:
        path = self.spool / f"{segment_stem(day)}.tar"
        names: list[str] = []
        if path.exists():
            names = _recover_tar(path)
        self._fh = open(path, "r+b" if path.exists() else "w+b")
        self._fh.seek(0, io.SEEK_END)
        self._tar = tarfile.open(fileobj=self._fh, mode="w", format=tarfile.PAX_FORMAT)
        self._tar.offset = self._fh.tell()
        self._names = set(names)
        self.current = ArchiveSegment(day, path, len(names), OPEN)

    def _close_current(self) -> ArchiveSegment:
        seg = self.current
        assert seg is not None and self._tar is not None
        self._tar.close()
        self._fh.close()
        gz = seg.path.with_name(seg.path.name + ".gz")
        tmp = gz.with_name(gz.name + ".part")
        with open(seg.path, "rb") as src, gzip.open(tmp, "wb") as dst:
            shutil.copyfileobj(src, dst)
        os.replace(tmp, gz)
        seg.path.unlink()
        seg.path = gz
        seg.state = CLOSED
        self.closed.append(seg)
        self.current, self._tar, self._fh = None, None, None
        logger.info("closed archive segment %s with %d entries", gz.name, seg.entry_count)
        return seg

    def rotate(self, now: float | None = None) -> list[ArchiveSegment]:
        """Close the open segment if ``now`` is past its day; returns closed ones.

        Days without messages still get an (empty) segment.
        """
        now = self.clock() if now is None else now
        today = utc_date(now)
        out = []
        with self._lock:
            if self.current is None:
                self._open(today)
                return out
            while self.current.date < today:
                nxt = self.current.date + dt.timedelta(days=1)
                out.append(self._close_current())
                self._open(nxt)
        return out

    def close(self) -> None:
        with self._lock:
            if self._tar is not None:
                self._tar.close()
                self._fh.close()
                self._tar = None
                self._fh = None

    # appends

    def append(self, message: Message, now: float | None = None) -> str:
        now = self.clock() if now is None else now
        with self._lock:
            self.rotate(now)
            name = entry_name(message.topic, message.payload, now)
            base, n = name, 1
            while name in self._names:
                name = f"{base}_{n}"
                n += 1
            info = tarfile.TarInfo(name)
            info.size = len(message.payload)
            info.mtime = int(now)
            info.mode = 0o644
            start = self._tar.offset
            try:
                self._tar.addfile(info, io.BytesIO(message.payload))
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except OSError as e:
                # roll back the partial member so the tar stays readable
                self._fh.seek(start)
                self._fh.truncate()
                self._tar.offset = start
                if self._tar.members and self._tar.members[-1].name == name:
                    self._tar.members.pop()
                raise ArchiveFull(str(e)) from e
            self._names.add(name)
            self.current.entry_count += 1
            return name

    @property
    def segments(self) -> list[ArchiveSegment]:
        with self._lock:
            return list(self.closed) + ([self.current] if self.current else [])

    # consumer loop

    def drain(self, broker: Broker, queue: str = "osg.ps.archive", vhost: str | None = None) -> int:
        n = 0
        with broker.consume(queue, "archiver-drain", vhost=vhost) as c:
            for d in c:
                try:
                    self.append(d.message)
                except OSError:
                    logger.exception("archive write failed; message left on queue")
                    c.nack(d)
                    break
                c.ack(d)
                n += 1
        return n

    def run(self, broker: Broker, queue: str = "osg.ps.archive", vhost: str | None = None) -> None:
        with broker.consume(queue, "archiver", vhost=vhost) as c:
            while not self._stop.is_set():
                d = c.get(timeout=0.2)
                if d is None:
                    self.rotate()
                    continue
                try:
                    self.append(d.message)
                except OSError:
                    logger.exception("archive write failed; message left on queue")
                    c.nack(d)
                    self._stop.wait(1.0)
                    continue
                c.ack(d)

    def start(self, broker: Broker, queue: str = "osg.ps.archive", vhost: str | None = None) -> "Archiver":
        self._stop.clear()
        self._thread = threading.Thread(target=self.run, args=(broker, queue, vhost), name="archiver", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
            self._thread = None


def _recover_tar(path: Path) -> list[str]:
    """Truncate a possibly torn tar after its last complete member."""
    names: list[str] = []
    end = 0
    with open(path, "rb") as fh:
        size = os.fstat(fh.fileno()).st_size
        try:
            with tarfile.open(fileobj=fh, mode="r:") as tf:
                for m in tf:
                    stop = m.offset_data + ((m.size + tarfile.BLOCKSIZE - 1) // tarfile.BLOCKSIZE) * tarfile.BLOCKSIZE
                    if stop > size:
                        break
                    names.append(m.name)
                    end = stop
        except tarfile.TarError:
            pass
    with open(path, "r+b") as fh:
        fh.truncate(end)
    return names


def count_entries(path: Path) -> int:
    return sum(1 for _ in iter_entries(path))


def iter_entries(path: str | os.PathLike, errors: list | None = None) -> Iterator[ArchiveEntry]:
    """Yield entries of a segment (.tar or .tar.gz). Unreadable parts are
    reported into ``errors`` (when given) and skipped."""
    path = Path(path)
    mode = "r:gz" if path.name.endswith(".gz") else "r:"
    try:
        with tarfile.open(path, mode) as tf:
            while True:
                try:
                    m = tf.next()
                except (tarfile.TarError, OSError, EOFError, zlib.error) as e:
                    if errors is not None:
                        errors.append(f"{path.name}: {e}")
                    return
                if m is None:
                    return
                if not m.isfile():
                    continue
                topic, sep, _ = m.name.partition("/")
                try:
                    if not sep:
                        raise ValueError("entry has no topic prefix")
                    validate_key(topic)
                    fh = tf.extractfile(m)
                    body = fh.read()
                    if len(body) != m.size:
                        raise EOFError("short entry body")
                except (ValueError, tarfile.TarError, OSError, EOFError, zlib.error) as e:
                    if errors is not None:
                        errors.append(f"{path.name}:{m.name}: {e}")
                    if isinstance(e, ValueError):
                        continue
                    return
                yield ArchiveEntry(m.name, topic, body)
    except (tarfile.TarError, OSError, EOFError, zlib.error) as e:
        if errors is not None:
            errors.append(f"{path.name}: {e}")


class Uploader:
    """Moves closed segments to the archive destination, verifying checksums."""

    def __init__(self, destination: str | os.PathLike):
        self.destination = Path(destination)

    def upload(self, seg: ArchiveSegment) -> bool:
        if seg.state == UPLOADED:
            return True
        if seg.state != CLOSED:
            raise ValueError(f"segment {seg.path.name} is {seg.state}, not closed")
        if not self.destination.is_dir():
            logger.warning("archive destination %s unavailable; %s stays local", self.destination, seg.path.name)
            return False
        digest = file_sha256(seg.path)
        final = self.destination / seg.path.name
        tmp = final.with_name(final.name + ".part")
        try:
            shutil.copyfile(seg.path, tmp)
            if file_sha256(tmp) != digest:
                raise OSError(f"checksum mismatch uploading {seg.path.name}")
            os.replace(tmp, final)
        except OSError as e:
            logger.warning("upload of %s failed: %s", seg.path.name, e)
            if tmp.exists():
                tmp.unlink()
            return False
        seg.path.unlink()
        seg.path = final
        seg.state = UPLOADED
        return True

    def run_once(self, segments: Iterable[ArchiveSegment]) -> int:
        return sum(1 for s in list(segments) if s.state == CLOSED and self.upload(s))


def find_segments(
    dirs: Iterable[str | os.PathLike],
    start: dt.date | None = None,
    end: dt.date | None = None,
    include_open: bool = False,
) -> list[Path]:
    """Segment files in ``dirs`` dated within [start, end], oldest first.

    Only closed segments unless ``include_open``; an open segment's torn
    tail (if a writer is mid-append) is skipped by ``iter_entries``.
    """
    found: dict[str, Path] = {}
    patterns = [".tar.gz", ".tar"] if include_open else [".tar.gz"]
    for d in dirs:
        d = Path(d)
        if not d.is_dir():
            continue
        for suffix in patterns:
            for p in d.glob(f"{PREFIX}*{suffix}"):
                stem = p.name[len(PREFIX):-len(suffix)]
                try:
                    day = dt.date.fromisoformat(stem)
                except ValueError:
                    continue
                if (start is None or day >= start) and (end is None or day <= end):
                    found.setdefault(stem, p)
    return [found[k] for k in sorted(found)]


@dataclass
class ReplayReport:
    records: int
    skipped: int
    duration: float
    errors: list[str]

    @property
    def rate(self) -> float:
        return self.records / self.duration if self.duration > 0 else float("inf")

    def as_dict(self) -> dict:
        return {"records": self.records, "skipped": self.skipped, "duration": self.duration, "rate": self.rate}


def replay(
    segments: Iterable[str | os.PathLike | ArchiveSegment],
    broker: Broker,
    exchange: str = "osg.ps.replay",
    vhost: str | None = None,
    rate: float | None = None,
    name: str = "replayer",
) -> ReplayReport:
    """Publish every archived entry to ``exchange`` under its stored topic.

    The replay exchange is expected to feed the ingest path directly, never
    the archive queue. ``rate`` caps publishes per second.
    """
    broker.trusted.add(name)
    cred = LocalCredential(name)
    errors: list[str] = []
    records = 0
    t0 = time.monotonic()
    for seg in segments:
        path = seg.path if isinstance(seg, ArchiveSegment) else Path(seg)
        for entry in iter_entries(path, errors):
            if rate:
                due = t0 + records / rate
                delay = due - time.monotonic()
                if delay > 0:
                    time.sleep(delay)
            broker.publish(vhost, exchange, entry.topic, entry.body, credential=cred, headers={"replay": "1"})
            records += 1
    for e in errors:
        logger.warning("replay skipped: %s", e)
    return ReplayReport(records, len(errors), time.monotonic() - t0, errors)
