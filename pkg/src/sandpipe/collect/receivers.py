"""HTCondor line receiver (TCP, windowed acks) and XRootD datagram receiver (UDP).

HTCondor stream protocol, one text line per frame::

    client: HELLO <hostname>
    server: OK <window>          or  DENY <reason>   (then closes)
    client: <log line>           (at most <window> unacknowledged)
    server: ACK <count>          cumulative lines forwarded to the bus

The client may not send more than ``window`` lines past the last ACK; the
server acks once it has forwarded a full window or the stream goes idle,
and holds acks back while ``pressure()`` reports the bus is backed up.
"""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading
import time
from typing import Callable

from ..records import encode

logger = logging.getLogger(__name__)

HTCONDOR_TOPIC = "htcondor.raw.xfer"
XROOTD_TOPIC = "xrootd.raw.tcp"

Publisher = Callable[[str, bytes], bool]


class Unauthorized(Exception):
    pass


class HTCondorReceiver:
    def __init__(
        self,
        publish: Publisher,
        allowed_clients: set[str],
        window: int = 100,
        clock: Callable[[], float] = time.time,
        pressure: Callable[[], bool] | None = None,
    ):
        self.publish = publish
        self.allowed_clients = set(allowed_clients)
        self.window = window
        self.clock = clock
        self.pressure = pressure or (lambda: False)
        self.published = 0
        self.rejected = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def authorize(self, client_identity: str) -> None:
        if client_identity not in self.allowed_clients:
            with self._lock:
                self.rejected += 1
            raise Unauthorized(f"client {client_identity!r} is not allowed")

    def receive_htcondor_line(self, line: str, client_identity: str) -> bool:
        self.authorize(client_identity)
        body = {"line": line.rstrip("\r\n"), "host": client_identity, "received_at": self.clock()}
        ok = self.publish(HTCONDOR_TOPIC, encode(body))
        if ok:
            with self._lock:
                self.published += 1
        return ok

    def note_in_flight(self, n: int) -> None:
        with self._lock:
            self.max_in_flight = max(self.max_in_flight, n)


class _HTCondorHandler(socketserver.BaseRequestHandler):
    idle_ack = 0.05

    def handle(self):
        rx: HTCondorReceiver = self.server.receiver
        sock: socket.socket = self.request
        buf = b""
        forwarded = 0
        unacked = 0

        def send(line: str) -> None:
            sock.sendall(line.encode() + b"\n")

        def ack() -> None:
            nonlocal unacked
            while rx.pressure():
                time.sleep(0.01)
            send(f"ACK {forwarded}")
            unacked = 0

        sock.settimeout(10.0)
        try:
            while b"\n" not in buf:
                chunk = sock.recv(4096)
                if not chunk:
                    return
                buf += chunk
            hello, buf = buf.split(b"\n", 1)
            parts = hello.decode(errors="replace").split()
            if len(parts) != 2 or parts[0] != "HELLO":
                send("DENY bad-hello")
                return
            client = parts[1]
            try:
                rx.authorize(client)
            except Unauthorized:
                send("DENY unauthorized")
                return
            send(f"OK {rx.window}")
            sock.settimeout(self.idle_ack)
            while True:
                while b"\n" in buf:
                    raw, buf = buf.split(b"\n", 1)
                    unacked += 1
                    rx.note_in_flight(unacked)
                    if not rx.receive_htcondor_line(raw.decode(errors="replace"), client):
                        logger.warning("bus refused htcondor line from %s; closing stream", client)
                        return
                    forwarded += 1
                    if unacked >= rx.window:
                        ack()
                try:
                    chunk = sock.recv(65536)
                except socket.timeout:
                    if unacked:
                        ack()
                    continue
                if not chunk:
                    if unacked:
                        ack()
                    return
                buf += chunk
        except (ConnectionError, OSError) as e:
            logger.info("htcondor stream closed: %s", e)


class HTCondorServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, receiver: HTCondorReceiver, host: str = "127.0.0.1", port: int = 0):
        self.receiver = receiver
        super().__init__((host, port), _HTCondorHandler)
        self._thread: threading.Thread | None = None

    def start(self) -> "HTCondorServer":
        self._thread = threading.Thread(target=self.serve_forever, name="htcondor-rx", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


class HTCondorClient:
    """Filebeat stand-in: ships lines and honours the server's window."""

    def __init__(self, host: str, port: int, hostname: str, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.hostname = hostname
        self._buf = b""
        self.acked = 0
        self.sent = 0
        self.backpressure_waits = 0
        self.max_in_flight = 0
        self._send(f"HELLO {hostname}")
        reply = self._readline().split()
        if not reply or reply[0] != "OK":
            self.sock.close()
            raise Unauthorized(" ".join(reply[1:]) or "denied")
        self.window = int(reply[1])

    def _send(self, line: str) -> None:
        self.sock.sendall(line.encode() + b"\n")

    def _readline(self) -> str:
        while b"\n" not in self._buf:
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ConnectionError("server closed the stream")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line.decode()

    def _read_ack(self) -> None:
        parts = self._readline().split()
        if len(parts) != 2 or parts[0] != "ACK":
            raise ConnectionError(f"unexpected frame {parts!r}")
        self.acked = int(parts[1])

    def ship(self, lines) -> int:
        for line in lines:
            while self.sent - self.acked >= self.window:
                self.backpressure_waits += 1
                self._read_ack()
            self._send(line)
            self.sent += 1
            self.max_in_flight = max(self.max_in_flight, self.sent - self.acked)
        while self.acked < self.sent:
            self._read_ack()
        return self.acked

    def close(self) -> None:
        self.sock.close()


REQUIRED_XROOTD_KEYS = ("host", "peer", "timestamp")


class XRootDReceiver:
    def __init__(self, publish: Publisher):
        self.publish = publish
        self.published = 0
        self.malformed = 0
        self._lock = threading.Lock()

    def receive_xrootd_datagram(self, data: bytes) -> bool:
        try:
            obj = json.loads(data)
            if not isinstance(obj, dict):
                raise ValueError("not an object")
            missing = [k for k in REQUIRED_XROOTD_KEYS if k not in obj]
            if missing:
                raise ValueError(f"missing {missing}")
            if not any(k.startswith("tcpi_") for k in obj):
                raise ValueError("no TCP statistics")
        except (ValueError, UnicodeDecodeError) as e:
            with self._lock:
                self.malformed += 1
            logger.debug("dropping malformed xrootd datagram: %s", e)
            return False
        ok = self.publish(XROOTD_TOPIC, bytes(data))
        if ok:
            with self._lock:
                self.published += 1
        return ok


class _XRootDHandler(socketserver.BaseRequestHandler):
    def handle(self):
        data, _sock = self.request
        self.server.receiver.receive_xrootd_datagram(data)


class XRootDServer(socketserver.UDPServer):
    def __init__(self, receiver: XRootDReceiver, host: str = "127.0.0.1", port: int = 0):
        self.receiver = receiver
        super().__init__((host, port), _XRootDHandler)
        self._thread: threading.Thread | None = None

    def start(self) -> "XRootDServer":
        self._thread = threading.Thread(target=self.serve_forever, name="xrootd-rx", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
