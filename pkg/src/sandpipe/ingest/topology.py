from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable


@dataclass(frozen=True)
class SiteTopology:
    """Static site, address, AS and location maps loaded once per ingester.

    ``resolver`` is an optional live reverse-lookup hook consulted only when
    ``ip_to_host`` has no entry. Tests leave it unset.
    """

    host_to_site: dict[str, dict] = field(default_factory=dict)
    ip_to_host: dict[str, str] = field(default_factory=dict)
    ip_to_asn: dict[str, int] = field(default_factory=dict)
    ip_to_geo: dict[str, dict] = field(default_factory=dict)
    resolver: Callable[[str], str | None] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        host_to_ip: dict[str, str] = {}
        for ip, host in self.ip_to_host.items():
            host_to_ip.setdefault(host, ip)
        object.__setattr__(self, "_host_to_ip", host_to_ip)

    def host_for(self, ip: str) -> str | None:
        host = self.ip_to_host.get(ip)
        if host is None and self.resolver is not None:
            host = self.resolver(ip)
        return host

    def ip_for(self, host: str) -> str | None:
        return self._host_to_ip.get(host)

    def site_for(self, host: str | None) -> dict | None:
        return self.host_to_site.get(host) if host else None

    def asn_for(self, ip: str | None) -> int | None:
        return self.ip_to_asn.get(ip) if ip else None

    def geo_for(self, ip: str | None) -> dict | None:
        return self.ip_to_geo.get(ip) if ip else None

    def to_json(self) -> dict:
        return {
            "host_to_site": self.host_to_site,
            "ip_to_host": self.ip_to_host,
            "ip_to_asn": self.ip_to_asn,
            "ip_to_geo": self.ip_to_geo,
        }

    def dump(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True))

    @classmethod
    def from_json(cls, d: dict) -> "SiteTopology":
        return cls(
            host_to_site=dict(d.get("host_to_site", {})),
            ip_to_host=dict(d.get("ip_to_host", {})),
            ip_to_asn={k: int(v) for k, v in d.get("ip_to_asn", {}).items()},
            ip_to_geo=dict(d.get("ip_to_geo", {})),
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SiteTopology":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))
