"""Idempotent document store: upsert-by-id over an append-only JSON journal.

The journal holds one ``{"id", "version", "doc"}`` object per line; the
in-memory index is rebuilt from it on open, last line per id winning.
"""

from __future__ import annotations

import bisect
import json
import logging
import os
import threading
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable

logger = logging.getLogger(__name__)

CREATED = "created"
OVERWRITTEN = "overwritten"

VOLATILE_FIELDS = ("ingest_time",)


class StoreError(Exception):
    pass


@dataclass(frozen=True)
class StoredDocument:
    id: str
    document: dict
    version: int


def serialize(doc: dict) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def content(doc: dict) -> dict:
    """Document without fields that legitimately differ between ingests."""
    return {k: v for k, v in doc.items() if k not in VOLATILE_FIELDS}


class DocumentStore:
    def __init__(self, path: str | os.PathLike | None = None, name: str = "store", fsync: bool = False):
        self.name = name
        self.path = Path(path) if path else None
        self.fsync = fsync
        self._docs: dict[str, StoredDocument] = {}
        self._sizes: dict[str, int] = {}
        # sorted (timestamp, id) for range queries
        self._order: list[tuple[float, str]] = []
        self._lock = threading.RLock()
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                self._load()
            self._fh = open(self.path, "a", encoding="utf-8")

    def _load(self) -> None:
        with open(self.path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError:
                    logger.warning("%s: skipping torn journal line %d", self.path, lineno)
                    continue
                self._apply(rec["id"], rec["doc"], rec["version"])

    def _apply(self, doc_id: str, doc: dict, version: int) -> None:
        old = self._docs.get(doc_id)
        if old is not None:
            key = (_ts(old.document), doc_id)
            i = bisect.bisect_left(self._order, key)
            if i < len(self._order) and self._order[i] == key:
                del self._order[i]
        self._docs[doc_id] = StoredDocument(doc_id, doc, version)
        self._sizes[doc_id] = len(serialize(doc).encode())
        bisect.insort(self._order, (_ts(doc), doc_id))

    def upsert(self, doc: dict) -> str:
        doc_id = doc.get("id")
        if not doc_id:
            raise StoreError("document has no id")
        with self._lock:
            old = self._docs.get(doc_id)
            version = 1 if old is None else old.version + 1
            if self._fh is not None:
                try:
                    self._fh.write(json.dumps({"id": doc_id, "version": version, "doc": doc}, sort_keys=True) + "\n")
                    self._fh.flush()
                    if self.fsync:
                        os.fsync(self._fh.fileno())
                except OSError as e:
                    raise StoreError(f"journal write failed: {e}") from e
            self._apply(doc_id, dict(doc), version)
            return CREATED if old is None else OVERWRITTEN

    def get(self, doc_id: str) -> StoredDocument | None:
        with self._lock:
            return self._docs.get(doc_id)

    def __len__(self) -> int:
        with self._lock:
            return len(self._docs)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._docs

    def query(
        self,
        start: float | None = None,
        end: float | None = None,
        test_type: str | None = None,
        source: str | None = None,
        dest: str | None = None,
    ) -> list[dict]:
        """Documents with start <= timestamp < end matching every given predicate."""
        if start is not None and end is not None and end < start:
            raise ValueError("query range end precedes start")
        with self._lock:
            lo = 0 if start is None else bisect.bisect_left(self._order, (start, ""))
            hi = len(self._order) if end is None else bisect.bisect_left(self._order, (end, ""))
            out = []
            for _, doc_id in self._order[lo:hi]:
                d = self._docs[doc_id].document
                if test_type is not None and d.get("test_type") != test_type:
                    continue
                if source is not None and source not in (d.get("source_host"), d.get("source_ip")):
                    continue
                if dest is not None and dest not in (d.get("dest_host"), d.get("dest_ip")):
                    continue
                out.append(d)
            return out

    def stats(self) -> dict[str, Any]:
        with self._lock:
            per: dict[str, dict[str, int]] = defaultdict(lambda: {"count": 0, "bytes": 0})
            for doc_id, sd in self._docs.items():
                t = sd.document.get("test_type", "unknown")
                per[t]["count"] += 1
                per[t]["bytes"] += self._sizes[doc_id]
            total = {
                "count": sum(v["count"] for v in per.values()),
                "bytes": sum(v["bytes"] for v in per.values()),
            }
            return {"types": dict(sorted(per.items())), "total": total}

    def documents(self) -> Iterable[dict]:
        with self._lock:
            return [sd.document for sd in self._docs.values()]

    def snapshot(self) -> dict[str, dict]:
        """id -> content map, ignoring volatile fields; for equality checks."""
        with self._lock:
            return {i: content(sd.document) for i, sd in self._docs.items()}

    def wipe(self) -> None:
        with self._lock:
            self._docs.clear()
            self._sizes.clear()
            self._order.clear()
            if self._fh is not None:
                self._fh.close()
                self._fh = open(self.path, "w", encoding="utf-8")

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None


def _ts(doc: dict) -> float:
    ts = doc.get("timestamp", 0.0)
    return float(ts) if isinstance(ts, (int, float)) else 0.0


def add_store_routes(router, store: DocumentStore) -> None:
    """Read-only GET /query and GET /stats."""
    from .httpd import Response

    def query(req):
        q = req.query
        try:
            docs = store.query(
                start=float(q["start"]) if "start" in q else None,
                end=float(q["end"]) if "end" in q else None,
                test_type=q.get("test_type"),
                source=q.get("source"),
                dest=q.get("dest"),
            )
        except ValueError as e:
            return Response.json({"error": str(e)}, 400)
        return Response.json({"count": len(docs), "documents": docs})

    router.add("GET", "/query", query)
    router.add("GET", "/stats", lambda req: Response.json(store.stats()))
