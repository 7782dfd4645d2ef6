"""Normalization, dedup ids, enrichment and the ingester consumer loop."""

from .enrich import enrich, enrich_meta, flatten, latency_summary, loss_fraction, trace_annotation
from .htcondor import domain_of, enrich_htcondor, htcondor_id, native
from .loop import HTCONDOR, META, PERFSONAR, XROOTD, Ingester, build_document, dead_letters
from .normalize import NormalizedRecord, RecordError, canonical_key, normalize, record_id
from .topology import SiteTopology

__all__ = [
    "HTCONDOR",
    "META",
    "PERFSONAR",
    "XROOTD",
    "Ingester",
    "NormalizedRecord",
    "RecordError",
    "SiteTopology",
    "build_document",
    "canonical_key",
    "dead_letters",
    "domain_of",
    "enrich",
    "enrich_htcondor",
    "enrich_meta",
    "flatten",
    "htcondor_id",
    "latency_summary",
    "loss_fraction",
    "native",
    "normalize",
    "record_id",
    "trace_annotation",
]
