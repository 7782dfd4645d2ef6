"""Token issuance and scope-checked authorization for bus writes.

Tokens are ES256-signed JWTs carrying a single scope claim of the form
``<server>.write:<vhost>/<exchange>/<key_pattern>``. Issuance is gated on
the requesting host's IP matching the registry entry for that hostname.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import jwt
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric import ec

from .bus import match_topic, validate_key, validate_pattern

ALGORITHM = "ES256"
DEFAULT_TTL = 4 * 3600
DEFAULT_SERVER = "rabbit_server"

BAD_SIGNATURE = "bad-signature"
EXPIRED = "expired"
WRONG_AUDIENCE = "wrong-audience"
SCOPE_MISMATCH = "scope-mismatch"


class ScopeError(ValueError):
    pass


class IssuanceDenied(Exception):
    pass


@dataclass(frozen=True)
class Scope:
    server: str
    action: str
    vhost: str
    exchange: str
    key_pattern: str

    def __str__(self) -> str:
        return f"{self.server}.{self.action}:{self.vhost}/{self.exchange}/{self.key_pattern}"


def parse_scope(s: str) -> Scope:
    head, sep, resource = s.partition(":")
    if not sep:
        raise ScopeError(f"scope {s!r}: missing ':' between permission and resource")
    server, dot, action = head.rpartition(".")
    if not dot or not server:
        raise ScopeError(f"scope {s!r}: permission {head!r} is not <server>.<action>")
    if action != "write":
        raise ScopeError(f"scope {s!r}: unsupported action {action!r}")
    parts = resource.split("/")
    if len(parts) != 3:
        raise ScopeError(f"scope {s!r}: resource {resource!r} is not <vhost>/<exchange>/<key_pattern>")
    vhost, exchange, pattern = parts
    for label, value in (("vhost", vhost), ("exchange", exchange), ("key pattern", pattern)):
        if not value:
            raise ScopeError(f"scope {s!r}: empty {label}")
    try:
        validate_pattern(pattern)
    except ValueError as e:
        raise ScopeError(f"scope {s!r}: bad key pattern {pattern!r}: {e}") from None
    return Scope(server, action, vhost, exchange, pattern)


@dataclass(frozen=True)
class TokenClaims:
    scope: str
    exp: int
    aud: str
    sub: str
    client_id: str

    def as_dict(self) -> dict:
        return {"scope": self.scope, "exp": self.exp, "aud": self.aud, "sub": self.sub, "client_id": self.client_id}


@dataclass(frozen=True)
class RegistryEntry:
    registered_ip: str
    allowed_scope: Scope


class ToolkitRegistry:
    def __init__(self, entries: dict[str, RegistryEntry] | None = None):
        self.entries: dict[str, RegistryEntry] = dict(entries or {})

    def add(self, hostname: str, ip: str, scope: Scope | str) -> None:
        if hostname in self.entries:
            raise ValueError(f"duplicate toolkit hostname {hostname!r}")
        if isinstance(scope, str):
            scope = parse_scope(scope)
        self.entries[hostname] = RegistryEntry(ip, scope)

    def __contains__(self, hostname: str) -> bool:
        return hostname in self.entries

    def get(self, hostname: str) -> RegistryEntry | None:
        return self.entries.get(hostname)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ToolkitRegistry":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        reg = cls()
        for host, entry in raw.items():
            reg.add(host, entry["ip"], entry["scope"])
        return reg

    def dump(self, path: str | os.PathLike) -> None:
        data = {h: {"ip": e.registered_ip, "scope": str(e.allowed_scope)} for h, e in self.entries.items()}
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def generate_keypair() -> tuple[bytes, bytes]:
    """Return (private_pem, public_pem) for a fresh P-256 key."""
    key = ec.generate_private_key(ec.SECP256R1())
    priv = key.private_bytes(
        serialization.Encoding.PEM,
        serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption(),
    )
    pub = key.public_key().public_bytes(
        serialization.Encoding.PEM,
        serialization.PublicFormat.SubjectPublicKeyInfo,
    )
    return priv, pub


def write_keypair(private_path: str | os.PathLike, public_path: str | os.PathLike) -> None:
    priv, pub = generate_keypair()
    Path(private_path).parent.mkdir(parents=True, exist_ok=True)
    Path(private_path).write_bytes(priv)
    os.chmod(private_path, 0o600)
    Path(public_path).write_bytes(pub)


def load_key(path: str | os.PathLike) -> bytes:
    return Path(path).read_bytes()


def sign_claims(claims: TokenClaims | dict, signing_key: bytes) -> str:
    payload = claims.as_dict() if isinstance(claims, TokenClaims) else dict(claims)
    return jwt.encode(payload, signing_key, algorithm=ALGORITHM)


def issue_token(
    subject: str,
    requester_ip: str,
    registry: ToolkitRegistry,
    now: float,
    signing_key: bytes,
    ttl: float = DEFAULT_TTL,
    server_name: str = DEFAULT_SERVER,
) -> str:
    entry = registry.get(subject)
    if entry is None:
        raise IssuanceDenied(f"unknown toolkit {subject!r}")
    if requester_ip != entry.registered_ip:
        raise IssuanceDenied(f"request for {subject!r} came from {requester_ip}, registered {entry.registered_ip}")
    claims = TokenClaims(
        scope=str(entry.allowed_scope),
        exp=int(now + ttl),
        aud=server_name,
        sub=subject,
        client_id=subject,
    )
    return sign_claims(claims, signing_key)


@dataclass(frozen=True)
class Decision:
    allowed: bool
    reason: str = ""
    subject: str | None = None

    def __bool__(self) -> bool:
        return self.allowed


def verify_and_authorize(
    token: str,
    server_name: str,
    now: float,
    vhost: str,
    exchange: str,
    key: str,
    public_key: bytes,
) -> Decision:
    try:
        claims = jwt.decode(
            token,
            public_key,
            algorithms=[ALGORITHM],
            options={"verify_exp": False, "verify_aud": False, "verify_iat": False, "verify_nbf": False},
        )
    except jwt.PyJWTError:
        return Decision(False, BAD_SIGNATURE)
    sub = claims.get("sub")
    exp = claims.get("exp")
    if not isinstance(exp, (int, float)) or now >= exp:
        return Decision(False, EXPIRED, sub)
    if claims.get("aud") != server_name:
        return Decision(False, WRONG_AUDIENCE, sub)
    try:
        scope = parse_scope(claims.get("scope", ""))
        validate_key(key)
    except (ScopeError, ValueError, TypeError):
        return Decision(False, SCOPE_MISMATCH, sub)
    if (scope.server, scope.vhost, scope.exchange) != (server_name, vhost, exchange):
        return Decision(False, SCOPE_MISMATCH, sub)
    if not match_topic(scope.key_pattern, key):
        return Decision(False, SCOPE_MISMATCH, sub)
    return Decision(True, "", sub)


class TokenAuthorizer:
    """Adapter exposing verify_and_authorize as a Broker authorizer."""

    def __init__(self, public_key: bytes, server_name: str = DEFAULT_SERVER, clock=None):
        self.public_key = public_key
        self.server_name = server_name
        self.clock = clock or time.time

    def __call__(self, token, vhost: str, exchange: str, key: str) -> tuple[bool, str]:
        d = verify_and_authorize(token, self.server_name, self.clock(), vhost, exchange, key, self.public_key)
        if d.allowed:
            return True, d.subject or "unknown"
        return False, d.reason


class ConfigService:
    """Hands a toolkit its mesh configuration plus a fresh write token.

    The issuance check compares the TCP peer address against the registry.
    ``mesh_config(hostname)`` supplies the configuration document.
    """

    def __init__(
        self,
        registry: ToolkitRegistry,
        signing_key: bytes,
        mesh_config=None,
        server_name: str = DEFAULT_SERVER,
        ttl: float = DEFAULT_TTL,
        clock=time.time,
    ):
        self.registry = registry
        self.signing_key = signing_key
        self.mesh_config = mesh_config or (lambda host: {"host": host, "tests": []})
        self.server_name = server_name
        self.ttl = ttl
        self.clock = clock

    def request(self, hostname: str, peer_ip: str) -> dict:
        token = issue_token(hostname, peer_ip, self.registry, self.clock(), self.signing_key, self.ttl, self.server_name)
        return {"config": self.mesh_config(hostname), "token": token}

    def add_routes(self, router) -> None:
        from .httpd import Response

        def get_config(req):
            try:
                return Response.json(self.request(req.params["hostname"], req.peer))
            except IssuanceDenied as e:
                return Response.json({"error": str(e)}, 403)

        router.add("GET", "/config/{hostname}", get_config)
