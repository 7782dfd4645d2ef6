"""Minimal routed HTTP server on top of http.server, run in a daemon thread."""

from __future__ import annotations

import json
import logging
import re
import threading
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qs, urlsplit

logger = logging.getLogger(__name__)


@dataclass
class Request:
    method: str
    path: str
    params: dict[str, str]
    query: dict[str, str]
    headers: dict[str, str]
    body: bytes
    peer: str


@dataclass
class Response:
    status: int = 200
    body: bytes = b""
    content_type: str = "application/json"
    headers: dict[str, str] = field(default_factory=dict)

    @classmethod
    def json(cls, obj, status: int = 200) -> "Response":
        return cls(status, json.dumps(obj, sort_keys=True).encode())

    @classmethod
    def text(cls, s: str, status: int = 200) -> "Response":
        return cls(status, s.encode(), "text/plain; version=0.0.4")


Handler = Callable[[Request], Response]


class Router:
    def __init__(self):
        self._routes: list[tuple[str, re.Pattern, Handler]] = []

    def add(self, method: str, template: str, handler: Handler) -> None:
        # "/publish/{vhost}/{exchange}" -> named groups matching one path segment
        rx = re.sub(r"\{(\w+)\}", r"(?P<\1>[^/]+)", template)
        self._routes.append((method.upper(), re.compile(f"^{rx}$"), handler))

    def dispatch(self, req: Request) -> Response:
        allowed = False
        for method, rx, handler in self._routes:
            m = rx.match(req.path)
            if m is None:
                continue
            allowed = True
            if method != req.method:
                continue
            req.params = m.groupdict()
            return handler(req)
        return Response.json({"error": "method not allowed" if allowed else "not found"}, 405 if allowed else 404)


def _make_handler(router: Router):
    class _H(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):
            logger.debug("%s %s", self.address_string(), fmt % args)

        def _handle(self):
            parts = urlsplit(self.path)
            n = int(self.headers.get("Content-Length") or 0)
            body = self.rfile.read(n) if n else b""
            req = Request(
                method=self.command,
                path=parts.path,
                params={},
                query={k: v[-1] for k, v in parse_qs(parts.query).items()},
                headers={k.lower(): v for k, v in self.headers.items()},
                body=body,
                peer=self.client_address[0],
            )
            try:
                resp = router.dispatch(req)
            except Exception:
                logger.exception("handler failed for %s %s", self.command, self.path)
                resp = Response.json({"error": "internal error"}, 500)
            self.send_response(resp.status)
            self.send_header("Content-Type", resp.content_type)
            self.send_header("Content-Length", str(len(resp.body)))
            for k, v in resp.headers.items():
                self.send_header(k, v)
            self.end_headers()
            self.wfile.write(resp.body)

        do_GET = _handle
        do_POST = _handle

    return _H


class HTTPService:
    """A Router served on (host, port); port 0 picks a free one."""

    def __init__(self, router: Router, host: str = "127.0.0.1", port: int = 0):
        self.router = router
        self._server = ThreadingHTTPServer((host, port), _make_handler(router))
        self._server.daemon_threads = True
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "HTTPService":
        self._thread = threading.Thread(target=self._server.serve_forever, name=f"http-{self.address[1]}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join()

    def __enter__(self) -> "HTTPService":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
