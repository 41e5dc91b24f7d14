"""Flat ``key=value`` configuration and gateway assembly.

Startup fails closed: every referenced file must exist and parse, otherwise
``ConfigError`` lists all problems and nothing is built.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .actions import RegistryParseError, load_registry
from .breaker import DetectionPolicy, TierBreaker
from .domain import AuditLog, ThreatKind
from .dos_guard import DosGuard, RateLimitConfig
from .gateway import Gateway, PermissionTable
from .ims import IdentityService, load_key_file
from .rules import DEFAULT_BODY_LIMIT, ParseError, parse_rules
from .sanitizer import PAPER_COMPAT, PRODUCTION, SanitizationPolicy
from .services import ServiceComponent, http_upstream, mock_service, MOCKS
from .vault import Vault, VaultKey

ENV_VAR = "SENTINEL_CONFIG"


class ConfigError(Exception):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


def parse_config(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep or not key.strip():
            raise ConfigError([f"line {lineno}: expected key=value"])
        out[key.strip()] = value.strip()
    return out


def resolve_config_path(path: Optional[str]) -> Optional[Path]:
    path = path or os.environ.get(ENV_VAR)
    return Path(path) if path else None


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


@dataclass
class GatewayConfig:
    base: Path
    values: dict = field(default_factory=dict)

    def get(self, key: str, default=None):
        return self.values.get(key, default)

    def path(self, key: str, default: Optional[str] = None) -> Optional[Path]:
        value = self.values.get(key, default)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base / p

    def integer(self, key: str, default: int) -> int:
        return int(self.values.get(key, default))

    @property
    def public_address(self) -> tuple[str, int]:
        return _host_port(self.get("listen.public", "127.0.0.1:8080"))

    @property
    def admin_address(self) -> tuple[str, int]:
        host, port = _host_port(self.get("listen.admin", "127.0.0.1:8081"))
        if host not in ("127.0.0.1", "localhost", "::1"):
            raise ConfigError([f"listen.admin must be a loopback address, got {host}"])
        return host, port

    def service_names(self) -> list[str]:
        return sorted({k.split(".")[1] for k in self.values if k.startswith("services.") and k.count(".") >= 2})


def load_config(path: Union[str, Path]) -> GatewayConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    return GatewayConfig(path.parent, parse_config(text))


def sanitization_policy(cfg: GatewayConfig) -> SanitizationPolicy:
    profile = cfg.get("sanitize.profile")
    if profile == "paper-compat":
        return PAPER_COMPAT
    if profile not in (None, "production"):
        raise ValueError(f"unknown sanitize.profile {profile!r}")
    if not any(k.startswith("sanitize.") and k != "sanitize.profile" for k in cfg.values):
        return PRODUCTION
    targets = [t.strip() for t in cfg.get("sanitize.targets", "query,body").split(",") if t.strip()]
    return SanitizationPolicy.parse(
        allowed=cfg.get("sanitize.allowed", "alnum"),
        strategy=cfg.get("sanitize.strategy", "strip"),
        case=cfg.get("sanitize.case", "preserve"),
        targets=targets,
        report=cfg.get("sanitize.report", "false").lower() == "true",
    )


def detection_policy(cfg: GatewayConfig) -> DetectionPolicy:
    kwargs = dict(threshold=cfg.integer("ids.threshold", 5), window=cfg.integer("ids.window_ms", 10_000),
                  cooldown=cfg.integer("ids.cooldown_ms", 30_000))
    if cfg.get("ids.watched"):
        kwargs["watched_kinds"] = frozenset(ThreatKind(k.strip()) for k in cfg.get("ids.watched").split(",") if k.strip())
    return DetectionPolicy(**kwargs)


def rate_limit(cfg: GatewayConfig) -> RateLimitConfig:
    return RateLimitConfig(
        max_requests=cfg.integer("dos.max_requests", 100),
        window=cfg.integer("dos.window_ms", 10_000),
        ban_duration=cfg.integer("dos.ban_ms", 60_000),
        max_tracked_sources=cfg.integer("dos.max_sources", 100_000),
    )


def build_gateway(cfg: GatewayConfig, *, notify=None) -> Gateway:
    problems: list[str] = []

    def attempt(what: str, fn):
        try:
            return fn()
        except (OSError, ValueError, ParseError, RegistryParseError, ConfigError) as exc:
            problems.append(f"{what}: {exc}")
            return None

    def required(key: str) -> Optional[Path]:
        p = cfg.path(key)
        if p is None:
            problems.append(f"missing required key {key}")
        return p

    rules_path, actions_path = required("rules.file"), required("actions.file")
    ims_key_path, principals_path = required("ims.key_file"), cfg.path("ims.principals_file")
    rules = attempt("rules.file", lambda: parse_rules(rules_path.read_text(), rules_path.name)) if rules_path else None
    registry = attempt("actions.file", lambda: load_registry(actions_path.read_text())) if actions_path else None
    ims_key = attempt("ims.key_file", lambda: load_key_file(ims_key_path)) if ims_key_path else None
    perm_path = cfg.path("permissions.file")
    permissions = attempt("permissions.file", lambda: PermissionTable.loads(perm_path.read_text())) if perm_path else PermissionTable()
    policy = attempt("sanitize", lambda: sanitization_policy(cfg))
    detection = attempt("ids", lambda: detection_policy(cfg))
    limits = attempt("dos", lambda: rate_limit(cfg))
    attempt("listen", lambda: (cfg.public_address, cfg.admin_address))

    vault = vault_key = None
    if cfg.get("vault.store"):
        vkey_path = required("vault.key_file")
        vault_key = attempt("vault.key_file", lambda: VaultKey.load(vkey_path)) if vkey_path else None
        store = cfg.path("vault.store")
        if not store.parent.is_dir():
            problems.append(f"vault.store: directory {store.parent} does not exist")

    services = {}
    for name in cfg.service_names():
        actions = frozenset(a.strip() for a in cfg.get(f"services.{name}.actions", "").split(",") if a.strip())
        handler = cfg.get(f"services.{name}.handler", f"mock:{name}")
        if handler.startswith("mock:"):
            kind = handler[5:]
            if kind not in MOCKS:
                problems.append(f"services.{name}.handler: unknown mock {kind!r}")
                continue
            services[name] = mock_service(kind, name, actions or None)
        elif handler.startswith(("http://", "https://")):
            services[name] = ServiceComponent(name, actions, http_upstream(handler))
        else:
            problems.append(f"services.{name}.handler: expected mock:<kind> or an http(s) URL")
    if registry is not None:
        for service, action in sorted(registry.entries):
            svc = services.get(service)
            if svc is None or action not in svc.actions:
                problems.append(f"actions.file: {service} {action} has no configured service component")

    if problems:
        raise ConfigError(problems)

    audit_path = cfg.path("audit.file")
    audit = AuditLog(audit_path)
    ims = IdentityService(
        ims_key,
        min_secret_len=cfg.integer("ims.min_secret", 8),
        service_ttl=cfg.integer("ims.service_ttl_ms", 300_000),
        hash_iterations=cfg.integer("ims.hash_iterations", 200_000),
        principals_file=principals_path,
    )
    breaker = TierBreaker(detection, notify=notify)
    if vault_key is not None:
        vault = Vault(cfg.path("vault.store"), vault_key)
    return Gateway(
        ims=ims, rules=rules, registry=registry, dos=DosGuard(limits), breaker=breaker,
        permissions=permissions, services=services, policy=policy, vault=vault, vault_key=vault_key,
        audit=audit, body_limit=cfg.integer("rules.body_limit", DEFAULT_BODY_LIMIT),
        permissions_file=perm_path,
    )
