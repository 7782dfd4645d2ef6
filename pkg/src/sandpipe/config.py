"""Pipeline configuration: a JSON file with per-section dataclasses.

Any key may be overridden from the environment as ``SANDPIPE_<SECTION>_<KEY>``
(for example ``SANDPIPE_COLLECTOR_WIDTH=16``). Unknown keys, in the file or
in the environment, are errors that name the offending key.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

ENV_PREFIX = "SANDPIPE_"


class ConfigError(ValueError):
    pass


@dataclass
class BusConfig:
    vhost: str = "osg-nma"
    alert_threshold: int = 10000
    spill_dir: str | None = None


@dataclass
class CollectorConfig:
    width: int = 8
    interval: float = 300.0
    jitter: float = 60.0
    seed: int = 0
    state_dir: str | None = None
    step: float = 0.05


@dataclass
class AuthConfig:
    private_key: str | None = None
    public_key: str | None = None
    server_name: str = "rabbit_server"
    registry: str | None = None
    ttl: float = 14400.0


@dataclass
class TopologyConfig:
    path: str | None = None


@dataclass
class StoreConfig:
    dir: str | None = None
    instances: list = field(default_factory=lambda: ["unl", "uc"])
    fsync: bool = False


@dataclass
class ArchiveConfig:
    spool: str | None = None
    destination: str | None = None
    upload_period: float = 3600.0
    enabled: bool = True


@dataclass
class MeshConfig:
    path: str | None = None
    inline: dict | None = None
    start: float | None = None


@dataclass
class ClockConfig:
    mode: str = "real"
    speedup: float = 1.0
    start: float | None = None


@dataclass
class HttpConfig:
    host: str = "127.0.0.1"
    port: int | None = None


@dataclass
class PipelineConfig:
    bus: BusConfig = field(default_factory=BusConfig)
    collector: CollectorConfig = field(default_factory=CollectorConfig)
    auth: AuthConfig = field(default_factory=AuthConfig)
    topology: TopologyConfig = field(default_factory=TopologyConfig)
    store: StoreConfig = field(default_factory=StoreConfig)
    archive: ArchiveConfig = field(default_factory=ArchiveConfig)
    mesh: MeshConfig = field(default_factory=MeshConfig)
    clock: ClockConfig = field(default_factory=ClockConfig)
    http: HttpConfig = field(default_factory=HttpConfig)
    state_dir: str | None = None
    base_dir: str = "."

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def validate(self) -> None:
        c = self.collector
        if c.width < 1:
            raise ConfigError("collector.width must be >= 1")
        if c.interval <= 0 or c.jitter < 0:
            raise ConfigError("collector.interval must be > 0 and collector.jitter >= 0")
        if self.clock.mode not in ("real", "virtual"):
            raise ConfigError(f"clock.mode must be real or virtual, got {self.clock.mode!r}")
        if self.clock.speedup <= 0:
            raise ConfigError("clock.speedup must be positive")
        if not self.store.instances or len(set(self.store.instances)) != len(self.store.instances):
            raise ConfigError("store.instances must be a non-empty list of distinct names")
        if self.bus.alert_threshold < 0:
            raise ConfigError("bus.alert_threshold must be >= 0")


_SECTION_TYPES = {
    "bus": BusConfig,
    "collector": CollectorConfig,
    "auth": AuthConfig,
    "topology": TopologyConfig,
    "store": StoreConfig,
    "archive": ArchiveConfig,
    "mesh": MeshConfig,
    "clock": ClockConfig,
    "http": HttpConfig,
}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where} must be true or false")
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{where} must be an integer")
    if isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where} must be a number")
    if isinstance(default, list) and not isinstance(value, list):
        raise ConfigError(f"{where} must be a list")
    return value


def _env_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def from_dict(data: Mapping[str, Any], env: Mapping[str, str] | None = None, base_dir: str = ".") -> PipelineConfig:
    if not isinstance(data, Mapping):
        raise ConfigError("config must be a JSON object")
    merged: dict[str, dict] = {}
    for key, value in data.items():
        if key == "state_dir":
            continue
        if key not in _SECTION_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        if not isinstance(value, Mapping):
            raise ConfigError(f"config section {key!r} must be an object")
        merged[key] = dict(value)
    state_dir = data.get("state_dir")

    for name, raw in (env if env is not None else os.environ).items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section == "state" and key == "dir":
            state_dir = raw
            continue
        if section not in _SECTION_TYPES or not key:
            raise ConfigError(f"unknown config key in environment variable {name}")
        merged.setdefault(section, {})[key] = _env_value(raw)

    kwargs = {}
    for section, cls in _SECTION_TYPES.items():
        values = merged.get(section, {})
        defaults = {f.name: (f.default if f.default is not dataclasses.MISSING else f.default_factory()) for f in dataclasses.fields(cls)}
        for k in values:
            if k not in defaults:
                raise ConfigError(f"unknown config key {section}.{k}")
        coerced = {k: _coerce(section, k, v, defaults[k]) for k, v in values.items()}
        kwargs[section] = cls(**coerced)
    cfg = PipelineConfig(**kwargs, state_dir=state_dir, base_dir=base_dir)
    cfg.validate()
    return cfg


def load_config(path: str | os.PathLike, env: Mapping[str, str] | None = None) -> PipelineConfig:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON: {e}") from None
    return from_dict(data, env=env, base_dir=str(p.parent.resolve()))
