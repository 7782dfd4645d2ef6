"""Network measurement ingest pipeline: message bus, token auth, collectors,
ingest/enrichment, raw archive with replay, document stores and a seeded
synthetic measurement mesh."""

__version__ = "0.1.0"
