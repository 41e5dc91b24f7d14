"""The request pipeline composing every defense layer, plus function permissions.

Fixed layer order::

    DosGuard -> Sanitizer (canonicalize + sanitize) -> Ims -> RuleEngine
             -> ActionFilter -> Permission -> Breaker (guarded dispatch)

The first Deny short-circuits. Any exception inside a layer is a Deny at that
layer, never an Allow.
"""
from __future__ import annotations

import json
import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Union

from . import rules as rule_engine
from .actions import ActionRegistry, check_action
from .breaker import RESET_PERMISSION, PermissionDenied, TierBreaker, TierIsolated
from .domain import (
    AuditLog, EventSink, Layer, MalformedRequest, RawRequest, Request, ThreatEvent, ThreatKind,
    Verdict, canonicalize_request, emit, fan_out,
)
from .dos_guard import DosGuard
from .ims import CertificateError, IdentityService
from .rules import RuleSet
from .sanitizer import PRODUCTION, SanitizationPolicy, sanitize_request
from .services import ServiceComponent, ServiceContext
from .vault import Vault, VaultKey

logger = logging.getLogger(__name__)

ADMIN_CLASS = "admin"
# rule-engine denials always name a rule; a crashed evaluation names this one
ENGINE_FAULT_RULE = "engine-fault"

STATUS_MESSAGES = {
    400: "bad request",
    401: "authentication failed",
    403: "request refused",
    429: "too many requests",
    500: "request refused",
    502: "upstream failure",
    503: "service temporarily unavailable",
}

# kinds used when a layer denies without having emitted its own event
_FALLBACK_KIND = {
    Layer.DOS_GUARD: ThreatKind.RATE_EXCEEDED,
    Layer.SANITIZER: ThreatKind.MALFORMED,
    Layer.IMS: ThreatKind.PERMISSION_DENIED,
    Layer.RULE_ENGINE: ThreatKind.RULE_MATCH,
    Layer.ACTION_FILTER: ThreatKind.UNKNOWN_ACTION,
    Layer.PERMISSION: ThreatKind.PERMISSION_DENIED,
    Layer.BREAKER: ThreatKind.UPSTREAM_FAILURE,
}


class PermissionTable:
    """Immutable function -> allowed principal classes map. Unlisted means denied."""

    def __init__(self, entries: Optional[Mapping[str, Iterable[str]]] = None):
        self._entries = {f: frozenset(c) for f, c in (entries or {}).items() if c}

    def allows(self, function: str, classes: Iterable[str]) -> bool:
        allowed = self._entries.get(function)
        return bool(allowed) and not allowed.isdisjoint(classes)

    def with_change(self, function: str, cls: str, allowed: bool) -> "PermissionTable":
        entries = dict(self._entries)
        current = set(entries.get(function, ()))
        if allowed:
            current.add(cls)
        else:
            current.discard(cls)
        entries[function] = frozenset(current)
        return PermissionTable(entries)

    def entries(self) -> dict:
        return dict(self._entries)

    def __eq__(self, other):
        return isinstance(other, PermissionTable) and self._entries == other._entries

    def dumps(self) -> str:
        return "".join(f"{f} {','.join(sorted(c))}\n" for f, c in sorted(self._entries.items()))

    @classmethod
    def loads(cls, text: str) -> "PermissionTable":
        entries = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"line {lineno}: expected 'function class[,class...]'")
            entries.setdefault(parts[0], set()).update(c for c in parts[1].split(",") if c)
        return cls(entries)


def function_name(req: Request) -> str:
    return f"{req.service}.{req.action}"


@dataclass(frozen=True)
class GatewayResponse:
    status: int
    body: bytes
    verdict: Verdict
    layers: tuple = ()
    request: Optional[Request] = field(default=None, compare=False, repr=False)

    def json(self) -> Any:
        return json.loads(self.body)


class _CallSink:
    """Forwards events and remembers whether the current layer emitted any."""

    def __init__(self, target: EventSink):
        self.target = target
        self.count = 0

    def __call__(self, event: ThreatEvent) -> None:
        self.count += 1
        self.target(event)


class Gateway:
    def __init__(
        self,
        *,
        ims: IdentityService,
        rules: RuleSet,
        registry: ActionRegistry,
        dos: DosGuard,
        breaker: TierBreaker,
        permissions: PermissionTable,
        services: Mapping[str, ServiceComponent],
        policy: SanitizationPolicy = PRODUCTION,
        vault: Optional[Vault] = None,
        vault_key: Optional[VaultKey] = None,
        audit: Optional[AuditLog] = None,
        body_limit: int = rule_engine.DEFAULT_BODY_LIMIT,
        permissions_file: Optional[Union[str, Path]] = None,
    ):
        self.ims = ims
        self.rules = rules
        self.registry = registry
        self.dos = dos
        self.breaker = breaker
        self.permissions = permissions
        self._services = dict(services)
        self.policy = policy
        self.vault = vault
        self._vault_key = vault_key
        self.audit = audit if audit is not None else AuditLog()
        self.body_limit = body_limit
        self.permissions_file = Path(permissions_file) if permissions_file else None
        self.invocations: Counter = Counter()
        self._count_lock = threading.Lock()
        self._admin_lock = threading.Lock()

        self.emit: EventSink = fan_out(self.audit, breaker)
        ims.events = self.emit
        dos.events = self.emit
        breaker.events = self.audit  # trips are audited, not fed back
        breaker.authorize = self._authorize
        if vault is not None:
            vault.events = self.emit
            vault.breaker = breaker

    # -- configuration swaps ------------------------------------------------

    def reload_rules(self, rules: RuleSet) -> None:
        self.rules = rules

    def reload_registry(self, registry: ActionRegistry) -> None:
        self.registry = registry

    def service_names(self) -> list[str]:
        return sorted(self._services)

    def received(self, service: str) -> list[Request]:
        """Requests a mock service has been handed (for inspection)."""
        return list(self._services[service].received)

    # -- permissions ----------------------------------------------------------

    def classes_of(self, principal_id: str) -> frozenset:
        p = self.ims.principal(principal_id)
        if p is None or not p.enabled:
            return frozenset()
        return p.classes

    def _authorize(self, principal_id: str, function: str) -> bool:
        return self.permissions.allows(function, self.classes_of(principal_id))

    def set_permission(self, function: str, cls: str, allowed: bool, operator: str,
                       now: int = 0) -> PermissionTable:
        if ADMIN_CLASS not in self.classes_of(operator):
            emit(self.emit, now, ThreatKind.PERMISSION_DENIED, operator, f"set_permission {function} refused")
            raise PermissionDenied(f"{operator} is not an administrator")
        with self._admin_lock:
            table = self.permissions.with_change(function, cls, allowed)
            if self.permissions_file is not None:
                tmp = self.permissions_file.with_suffix(".tmp")
                tmp.write_text(table.dumps())
                tmp.replace(self.permissions_file)
            self.permissions = table
        emit(self.audit, now, ThreatKind.ADMIN, operator,
             f"permission {function} {cls} {'granted' if allowed else 'revoked'}")
        return table

    def reset_breaker(self, now: int, operator: str):
        return self.breaker.reset(now, operator)

    # -- pipeline -------------------------------------------------------------

    def _count(self, layer: Layer) -> None:
        with self._count_lock:
            self.invocations[layer] += 1

    def handle(self, raw: RawRequest, now: int) -> GatewayResponse:
        trace: list[Layer] = []
        state: dict[str, Any] = {}

        def run(layer: Layer, step):
            trace.append(layer)
            self._count(layer)
            sink = _CallSink(self.emit)
            try:
                verdict, status = step(sink)
            except Exception:
                logger.exception("layer %s failed; denying", layer.value)
                rule_id = ENGINE_FAULT_RULE if layer is Layer.RULE_ENGINE else None
                verdict, status = Verdict.deny(layer, "internal-error", "layer failure", rule_id), 500
                emit(sink, now, ThreatKind.INTERNAL_ERROR, raw.source, f"{layer.value} failed")
            if not verdict.allowed and sink.count == 0:
                emit(sink, now, _FALLBACK_KIND[layer], raw.source, f"{verdict.reason}: {verdict.detail}")
            return verdict, status

        steps = (
            (Layer.DOS_GUARD, lambda sink: self._dos_step(raw, now, sink)),
            (Layer.SANITIZER, lambda sink: self._sanitize_step(raw, now, state, sink)),
            (Layer.IMS, lambda sink: self._ims_step(state, now, sink)),
            (Layer.RULE_ENGINE, lambda sink: self._rule_step(state, sink)),
            (Layer.ACTION_FILTER, lambda sink: self._action_step(state, sink)),
            (Layer.PERMISSION, lambda sink: self._permission_step(state, sink)),
            (Layer.BREAKER, lambda sink: self._dispatch_step(state, now, sink)),
        )
        for layer, step in steps:
            verdict, status = run(layer, step)
            if not verdict.allowed:
                return self._respond(status, verdict, trace, state)
        return GatewayResponse(200, state["response"], verdict, tuple(trace), state.get("req"))

    def _respond(self, status: int, verdict: Verdict, trace, state) -> GatewayResponse:
        body = json.dumps({"error": STATUS_MESSAGES.get(status, "request refused")}).encode()
        return GatewayResponse(status, body, verdict, tuple(trace), state.get("req"))

    def _dos_step(self, raw: RawRequest, now: int, sink):
        verdict = self.dos.record_and_check(raw.source, now, events=sink)
        return verdict, 429

    def _sanitize_step(self, raw: RawRequest, now: int, state, sink):
        try:
            req = canonicalize_request(raw, received_at=now)
        except MalformedRequest as exc:
            emit(sink, now, ThreatKind.MALFORMED, raw.source, str(exc))
            return Verdict.deny(Layer.SANITIZER, "malformed", str(exc)), 400
        state["req"] = sanitize_request(req, self.policy, events=sink)
        return Verdict.allow(Layer.SANITIZER), 200

    def _ims_step(self, state, now: int, sink):
        req: Request = state["req"]
        if not req.certificate:
            emit(sink, now, ThreatKind.MISSING_CREDENTIAL, req.source, "no certificate")
            return Verdict.deny(Layer.IMS, "missing-certificate"), 401
        try:
            subject, scope = self.ims.validate_certificate(req.certificate, now, req.source, events=sink)
        except CertificateError as exc:
            return Verdict.deny(Layer.IMS, exc.reason, str(exc)), 401
        if not self.classes_of(subject):
            return Verdict.deny(Layer.IMS, "auth-failed", "unknown or disabled subject"), 401
        if req.service not in scope:
            emit(sink, now, ThreatKind.PERMISSION_DENIED, req.source,
                 f"{subject} not scoped for {req.service!r}")
            return Verdict.deny(Layer.IMS, "out-of-scope"), 403
        state["subject"] = subject
        return Verdict.allow(Layer.IMS), 200

    def _rule_step(self, state, sink):
        result = rule_engine.evaluate(state["req"], self.rules, events=sink, body_limit=self.body_limit)
        return result.verdict, 403

    def _action_step(self, state, sink):
        return check_action(state["req"], self.registry, events=sink), 403

    def _permission_step(self, state, sink):
        req: Request = state["req"]
        function = function_name(req)
        if self.permissions.allows(function, self.classes_of(state["subject"])):
            return Verdict.allow(Layer.PERMISSION), 200
        emit(sink, req.received_at, ThreatKind.PERMISSION_DENIED, req.source,
             f"{state['subject']} may not call {function}")
        return Verdict.deny(Layer.PERMISSION, "permission"), 403

    def _dispatch_step(self, state, now: int, sink):
        req: Request = state["req"]
        svc = self._services.get(req.service)
        if svc is None or req.action not in svc.actions:
            return Verdict.deny(Layer.BREAKER, "upstream-failure", "no such service component"), 502
        try:
            result = self.dispatch(req, svc, state["subject"], now)
        except TierIsolated:
            emit(sink, now, ThreatKind.TIER_REFUSED, req.source, f"{req.service}.{req.action}")
            return Verdict.deny(Layer.BREAKER, "tier-isolated"), 503
        except Exception as exc:
            logger.warning("upstream %s failed: %r", req.service, exc)
            emit(sink, now, ThreatKind.UPSTREAM_FAILURE, req.source, f"{req.service}: {type(exc).__name__}")
            return Verdict.deny(Layer.BREAKER, "upstream-failure"), 502
        if isinstance(result, (bytes, bytearray)):
            state["response"] = bytes(result)
        elif isinstance(result, str):
            state["response"] = result.encode()
        else:
            state["response"] = json.dumps(result, sort_keys=True).encode()
        return Verdict.allow(Layer.BREAKER, "dispatched"), 200

    def dispatch(self, req: Request, svc: ServiceComponent, subject: str, now: int):
        """Invoke ``svc`` exactly once; data-tier access goes through the breaker."""
        ctx = ServiceContext(subject, now, self._vault_get(now, req.source), self._vault_put())
        if svc.record:
            svc.received.append(req)
        return svc.handler(req, ctx)

    def _vault_get(self, now: int, source: str):
        def get(record_key: str) -> bytes:
            if self.vault is None or self._vault_key is None:
                raise RuntimeError("no data tier configured")
            return self.vault.get(record_key, self._vault_key, now=now, source=source)
        return get

    def _vault_put(self):
        def put(record_key: str, data: bytes):
            if self.vault is None or self._vault_key is None:
                raise RuntimeError("no data tier configured")
            return self.vault.put(record_key, data, self._vault_key)
        return put


def default_permissions(registry: ActionRegistry, classes: Iterable[str] = ("user",)) -> PermissionTable:
    entries = {f"{s}.{a}": set(classes) for s, a in registry.entries}
    entries[RESET_PERMISSION] = {ADMIN_CLASS}
    return PermissionTable(entries)
