"""``sandpipe`` command line.

Exit codes: 0 success, 2 configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import signal
import sys
import threading
import time
import urllib.error
import urllib.request
from pathlib import Path

from . import auth
from .archive import find_segments, replay
from .bus import Broker
from .clock import parse_clock_spec
from .config import ConfigError, PipelineConfig, load_config
from .ingest import Ingester, SiteTopology
from .report import build_report, format_report, parse_window
from .store import DocumentStore

logger = logging.getLogger("sandpipe")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

DEMO_CONFIG = {
    "state_dir": "state",
    "bus": {"alert_threshold": 5000},
    "collector": {"width": 4},
    "clock": {"mode": "virtual", "speedup": 3600, "start": 1618358400.0},
    "mesh": {
        "inline": {
            "seed": 7,
            "n_toolkits": 4,
            "scale": 0.0001,
            "submit_hosts": ["submit0.osg.example.org", "submit1.osg.example.org"],
        }
    },
}


class RuntimeFailure(Exception):
    pass


def _config(args) -> PipelineConfig:
    if not getattr(args, "config", None):
        raise ConfigError("--config is required")
    return load_config(args.config)


def _state_dir(cfg: PipelineConfig) -> Path:
    if cfg.state_dir is None:
        raise ConfigError("state_dir must be set for this command")
    return cfg.resolve(cfg.state_dir)


def _store_paths(cfg: PipelineConfig) -> dict[str, Path]:
    base = cfg.resolve(cfg.store.dir) or _state_dir(cfg) / "stores"
    return {name: Path(base) / f"{name}.jsonl" for name in cfg.store.instances}


def _archive_dirs(cfg: PipelineConfig) -> list[Path]:
    root = None
    if cfg.archive.spool is None or cfg.archive.destination is None:
        root = _state_dir(cfg) / "archive"
    spool = cfg.resolve(cfg.archive.spool) or root / "spool"
    dest = cfg.resolve(cfg.archive.destination) or root / "tape"
    return [Path(dest), Path(spool)]


# commands


def cmd_pipeline_run(args) -> int:
    from .pipeline import Pipeline

    cfg = _config(args)
    clock = None
    if args.clock:
        try:
            spec_clock = parse_clock_spec(args.clock, cfg.clock.start if cfg.clock.start is not None else cfg.mesh.start)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if args.clock.startswith("virtual"):
            cfg.clock.mode = "virtual"
            cfg.clock.speedup = spec_clock.speedup
        else:
            cfg.clock.mode = "real"
    pipe = Pipeline(cfg, clock=clock)
    stop = threading.Event()

    def on_signal(signum, frame):
        logger.info("signal %d received, shutting down", signum)
        stop.set()

    old = {s: signal.signal(s, on_signal) for s in (signal.SIGTERM, signal.SIGINT)}
    try:
        pipe.start()
        print(json.dumps({"status": "running", "state_dir": str(pipe.state_dir)}), flush=True)
        stop.wait(args.duration)
    finally:
        for s, h in old.items():
            signal.signal(s, h)
        pipe.shutdown()
    summary = {
        "status": "stopped",
        "ledger": pipe.ledger(),
        "stores": {name: s.stats()["total"]["count"] for name, s in pipe.stores.items()},
        "archive_segments": [
            {"date": seg.date.isoformat(), "state": seg.state, "entries": seg.entry_count}
            for seg in (pipe.archiver.segments if pipe.archiver else [])
        ],
        "queue_depths": {k: q.depth for k, q in pipe.broker.queues(pipe.vhost).items() if q.depth},
        "alerts": len(pipe.broker.alerts(pipe.vhost)),
    }
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_token_issue(args) -> int:
    cfg = _config(args)
    a = cfg.auth
    if a.private_key is None or a.registry is None:
        raise ConfigError("auth.private_key and auth.registry are required to issue tokens")
    try:
        key = auth.load_key(cfg.resolve(a.private_key))
        registry = auth.ToolkitRegistry.load(cfg.resolve(a.registry))
    except (OSError, ValueError, KeyError) as e:
        raise ConfigError(f"auth: {e}") from None
    entry = registry.get(args.subject)
    ip = args.ip or (entry.registered_ip if entry else "")
    now = args.now if args.now is not None else time.time()
    try:
        token = auth.issue_token(args.subject, ip, registry, now, key, a.ttl, a.server_name)
    except auth.IssuanceDenied as e:
        raise RuntimeFailure(f"token denied: {e}") from None
    print(token)
    return EXIT_OK


def _date(s: str) -> dt.date:
    try:
        return dt.date.fromisoformat(s)
    except ValueError:
        raise ConfigError(f"bad date {s!r}; use YYYY-MM-DD") from None


def cmd_replay(args) -> int:
    from .pipeline import INGEST_BINDINGS, REPLAY, build_bus_topology, ingest_queue

    cfg = _config(args)
    start, end = _date(args.date_from), _date(args.date_to)
    if end < start:
        raise ConfigError("--to precedes --from")
    segments = find_segments(_archive_dirs(cfg), start, end, include_open=True)
    topo = SiteTopology.load(cfg.resolve(cfg.topology.path)) if cfg.topology.path else _mesh_topology(cfg)
    broker = Broker(default_vhost=cfg.bus.vhost)
    build_bus_topology(broker, tuple(cfg.store.instances), cfg.bus.vhost)
    stores = {}
    ingesters = []
    try:
        for name, path in _store_paths(cfg).items():
            stores[name] = DocumentStore(path, name=name)
            for kind in INGEST_BINDINGS:
                ingesters.append(Ingester(broker, ingest_queue(name, kind), stores[name], topo, kind, vhost=cfg.bus.vhost))
    except OSError as e:
        raise RuntimeFailure(f"store unavailable: {e}") from None
    for ing in ingesters:
        ing.start()
    try:
        rep = replay(segments, broker, REPLAY, cfg.bus.vhost, rate=args.rate)
    finally:
        for ing in ingesters:
            ing.stop()
        for ing in ingesters:
            ing.drain()
        for s in stores.values():
            s.close()
    out = rep.as_dict()
    out["segments"] = [str(p.name) for p in segments]
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def _mesh_topology(cfg: PipelineConfig) -> SiteTopology:
    from .synth import SyntheticMesh

    try:
        if cfg.mesh.inline is not None:
            return SyntheticMesh.from_config(cfg.mesh.inline).topology()
        if cfg.mesh.path is not None:
            return SyntheticMesh.load(cfg.resolve(cfg.mesh.path)).topology()
    except (OSError, ValueError) as e:
        raise ConfigError(f"mesh config: {e}") from None
    return SiteTopology()


def _load_documents(args) -> list[dict]:
    if args.url:
        try:
            with urllib.request.urlopen(args.url.rstrip("/") + "/query", timeout=30) as resp:
                return json.load(resp)["documents"]
        except (urllib.error.URLError, OSError, ValueError, KeyError) as e:
            raise RuntimeFailure(f"store unreachable at {args.url}: {e}") from None
    if args.store:
        path = Path(args.store)
    else:
        cfg = _config(args)
        paths = _store_paths(cfg)
        name = args.instance or cfg.store.instances[0]
        if name not in paths:
            raise ConfigError(f"unknown store instance {name!r}")
        path = paths[name]
    if not path.is_file():
        raise RuntimeFailure(f"store unreachable: {path} does not exist")
    try:
        store = DocumentStore(path)
    except (OSError, ValueError) as e:
        raise RuntimeFailure(f"store unreadable: {e}") from None
    try:
        return list(store.documents())
    finally:
        store.close()


def cmd_report(args) -> int:
    try:
        window = parse_window(args.window)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    docs = _load_documents(args)
    rep = build_report(docs, window, end=args.end)
    if args.json:
        print(json.dumps(rep, sort_keys=True))
    else:
        print(format_report(rep))
    return EXIT_OK


def cmd_demo_config(args) -> int:
    text = json.dumps(DEMO_CONFIG, indent=2)
    if args.output:
        Path(args.output).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_keys(args) -> int:
    auth.write_keypair(args.private, args.public)
    return EXIT_OK


# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sandpipe", description="Network measurement ingest pipeline.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    pipe = sub.add_parser("pipeline", help="run the pipeline")
    pipe_sub = pipe.add_subparsers(dest="action", required=True)
    run = pipe_sub.add_parser("run", help="start every component and run until stopped")
    run.add_argument("--config", required=True)
    run.add_argument("--clock", help="real or virtual:<speedup>")
    run.add_argument("--duration", type=float, default=None, help="real seconds to run (default: until SIGTERM)")
    run.set_defaults(func=cmd_pipeline_run)

    tok = sub.add_parser("token", help="token operations")
    tok_sub = tok.add_subparsers(dest="action", required=True)
    issue = tok_sub.add_parser("issue", help="issue a push token for a registered toolkit")
    issue.add_argument("--config", required=True)
    issue.add_argument("--subject", required=True)
    issue.add_argument("--ip", help="requester address (default: the registered one)")
    issue.add_argument("--now", type=float, default=None)
    issue.set_defaults(func=cmd_token_issue)

    rp = sub.add_parser("replay", help="replay archived segments into the stores")
    rp.add_argument("--config", required=True)
    rp.add_argument("--from", dest="date_from", required=True)
    rp.add_argument("--to", dest="date_to", required=True)
    rp.add_argument("--rate", type=float, default=None, help="max records per second")
    rp.set_defaults(func=cmd_replay)

    rep = sub.add_parser("report", help="per-type volumes and the weekly transfer summary")
    rep.add_argument("--config")
    rep.add_argument("--store", help="store journal path (instead of --config)")
    rep.add_argument("--url", help="store HTTP endpoint (instead of --config)")
    rep.add_argument("--instance", help="store instance name from the config")
    rep.add_argument("--window", default="7d")
    rep.add_argument("--end", type=float, default=None, help="window end (epoch seconds)")
    rep.add_argument("--json", action="store_true")
    rep.set_defaults(func=cmd_report)

    demo = sub.add_parser("demo-config", help="print a self-contained demo configuration")
    demo.add_argument("-o", "--output")
    demo.set_defaults(func=cmd_demo_config)

    keys = sub.add_parser("keygen", help="write an ES256 signing key pair")
    keys.add_argument("--private", required=True)
    keys.add_argument("--public", required=True)
    keys.set_defaults(func=cmd_keys)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"sandpipe: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeFailure as e:
        print(f"sandpipe: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("unexpected failure")
        print(f"sandpipe: runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
