"""Shared request model, verdicts, threat events and the audit log."""
from __future__ import annotations

import enum
import itertools
import logging
import re
import threading
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union
from urllib.parse import quote, quote_plus, unquote_to_bytes

logger = logging.getLogger(__name__)

CERT_HEADER = "x-ims-cert"


class SentinelError(Exception):
    """Base class for every error raised by the gateway layers."""


class MalformedRequest(SentinelError):
    pass


class AuditIOError(SentinelError):
    """The mirror file could not be written. The in-memory append already happened."""

    def __init__(self, seq: int, cause: BaseException):
        super().__init__(f"audit mirror write failed for seq {seq}: {cause}")
        self.seq = seq
        self.cause = cause


class Decision(str, enum.Enum):
    ALLOW = "Allow"
    DENY = "Deny"


class Layer(str, enum.Enum):
    DOS_GUARD = "DosGuard"
    SANITIZER = "Sanitizer"
    IMS = "Ims"
    RULE_ENGINE = "RuleEngine"
    ACTION_FILTER = "ActionFilter"
    PERMISSION = "Permission"
    BREAKER = "Breaker"


# Fixed pipeline order; the gateway relies on this sequence.
LAYER_ORDER = tuple(Layer)


class ThreatKind(str, enum.Enum):
    FORGERY = "Forgery"
    REPLAY = "Replay"
    EXPIRED = "Expired"
    RULE_MATCH = "RuleMatch"
    UNKNOWN_ACTION = "UnknownAction"
    RATE_EXCEEDED = "RateExceeded"
    TAMPERED_RECORD = "TamperedRecord"
    BREAKER_TRIP = "BreakerTrip"
    PERMISSION_DENIED = "PermissionDenied"
    # audited conditions that must not count as attacks by default
    MALFORMED = "Malformed"
    MISSING_CREDENTIAL = "MissingCredential"
    SANITIZED = "Sanitized"
    TIER_REFUSED = "TierRefused"
    UPSTREAM_FAILURE = "UpstreamFailure"
    INTERNAL_ERROR = "InternalError"
    ADMIN = "Admin"


@dataclass(frozen=True)
class Verdict:
    decision: Decision
    layer: Layer
    reason: str
    detail: str = ""
    rule_id: Optional[str] = None

    def __post_init__(self):
        if self.decision is Decision.DENY and not self.reason:
            raise ValueError("a Deny verdict needs a reason")
        fires = self.layer is Layer.RULE_ENGINE and self.decision is Decision.DENY
        if (self.rule_id is not None) != fires:
            raise ValueError("rule_id is set exactly for rule-engine denials")

    @property
    def allowed(self) -> bool:
        return self.decision is Decision.ALLOW

    @classmethod
    def allow(cls, layer: Layer, reason: str = "ok", detail: str = "") -> "Verdict":
        return cls(Decision.ALLOW, layer, reason, detail)

    @classmethod
    def deny(cls, layer: Layer, reason: str, detail: str = "", rule_id: Optional[str] = None) -> "Verdict":
        return cls(Decision.DENY, layer, reason, detail, rule_id)


@dataclass(frozen=True)
class ThreatEvent:
    at: int
    kind: ThreatKind
    source: str
    detail: str = ""
    seq: int = 0


EventSink = Callable[[ThreatEvent], None]


def emit(sink: Optional[EventSink], at: int, kind: ThreatKind, source: str, detail: str = "") -> None:
    if sink is not None:
        sink(ThreatEvent(at=at, kind=kind, source=source, detail=detail))


# ---------------------------------------------------------------------------
# requests

@dataclass(frozen=True)
class RawRequest:
    """An inbound call as it arrives off the wire.

    ``path`` may carry a ``?query`` suffix; ``query_string`` is appended to
    whatever the path already carries.
    """

    source: str
    path: str
    method: str = "GET"
    headers: Sequence[tuple[Union[str, bytes], str]] = ()
    body: bytes = b""
    query_string: str = ""
    request_id: Optional[str] = None


@dataclass(frozen=True)
class Request:
    request_id: str
    source: str
    path: str
    method: str = "GET"
    headers: tuple[tuple[str, str], ...] = ()
    query: tuple[tuple[str, str], ...] = ()
    body: bytes = b""
    certificate: Optional[str] = None
    received_at: int = 0

    @property
    def service(self) -> str:
        return _route(self.path)[0]

    @property
    def action(self) -> str:
        return _route(self.path)[1]

    def header(self, name: str) -> list[str]:
        name = name.lower()
        return [v for k, v in self.headers if k == name]

    def query_values(self, key: Optional[str] = None) -> list[str]:
        return [v for k, v in self.query if key is None or k == key]

    def body_text(self, limit: Optional[int] = None) -> str:
        data = self.body if limit is None else self.body[:limit]
        return data.decode("utf-8", errors="replace")

    def to_raw(self) -> RawRequest:
        """Re-encode into wire form; canonicalizing the result gives back this request."""
        qs = "&".join(f"{quote_plus(k, safe='')}={quote_plus(v, safe='')}" for k, v in self.query)
        headers = list(self.headers)
        return RawRequest(
            source=self.source,
            path=quote(self.path, safe="/"),
            method=self.method,
            headers=headers,
            body=self.body,
            query_string=qs,
            request_id=self.request_id,
        )


def _route(path: str) -> tuple[str, str]:
    parts = path.split("/")
    # "/svc/<service>/<action>" splits into ["", "svc", service, action]
    if len(parts) == 4 and parts[1] == "svc" and parts[2] and parts[3]:
        return parts[2], parts[3]
    return "", ""


_BAD_ESCAPE = re.compile(r"%(?![0-9A-Fa-f]{2})")
_ids = itertools.count(1)
_id_lock = threading.Lock()


def _next_request_id() -> str:
    with _id_lock:
        return f"r{next(_ids):012d}"


def _decode_once(text: str, *, plus: bool) -> str:
    if _BAD_ESCAPE.search(text):
        raise MalformedRequest("invalid percent-encoding")
    if plus:
        text = text.replace("+", " ")
    try:
        return unquote_to_bytes(text).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedRequest("percent-encoding does not decode to UTF-8") from exc


def canonical_path(path: str) -> str:
    """Decode ``path`` once and resolve dot segments against the root."""
    decoded = _decode_once(path, plus=False)
    if "%" in decoded:
        # a second layer of escapes would survive as "%xx"; refuse rather than decode twice
        raise MalformedRequest("double-encoded path")
    stack: list[str] = []
    for seg in decoded.split("/"):
        if seg in ("", "."):
            continue
        if seg == "..":
            if not stack:
                raise MalformedRequest("path escapes the root")
            stack.pop()
        else:
            stack.append(seg)
    return "/" + "/".join(stack)


def parse_query(qs: str) -> tuple[tuple[str, str], ...]:
    pairs = []
    for part in qs.split("&"):
        if not part:
            continue
        key, sep, value = part.partition("=")
        pairs.append((_decode_once(key, plus=True), _decode_once(value, plus=True)))
    return tuple(pairs)


def _header_name(name: Union[str, bytes]) -> str:
    if isinstance(name, bytes):
        try:
            name = name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedRequest("header name is not UTF-8") from exc
    try:
        name.encode("utf-8")
    except UnicodeEncodeError as exc:  # lone surrogates
        raise MalformedRequest("header name is not UTF-8") from exc
    return name.strip().lower()


def canonicalize_request(raw: RawRequest, received_at: int = 0) -> Request:
    if not raw.path or not raw.source:
        raise MalformedRequest("path and source are required")
    path, _, inline_qs = raw.path.partition("?")
    qs = "&".join(p for p in (inline_qs, raw.query_string) if p)
    headers = tuple((_header_name(k), v) for k, v in raw.headers)
    certs = [v for k, v in headers if k == CERT_HEADER]
    return Request(
        request_id=raw.request_id or _next_request_id(),
        source=raw.source,
        path=canonical_path(path),
        method=raw.method.upper(),
        headers=headers,
        query=parse_query(qs),
        body=bytes(raw.body),
        certificate=certs[0] if certs else None,
        received_at=received_at,
    )


# ---------------------------------------------------------------------------
# audit log

def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


_UNESCAPE = {"\\": "\\", "t": "\t", "n": "\n", "r": "\r"}


def _unescape(text: str) -> str:
    return re.sub(r"\\(.)", lambda m: _UNESCAPE.get(m.group(1), m.group(1)), text)


def format_audit_line(event: ThreatEvent) -> str:
    fields = (str(event.seq), str(event.at), event.kind.value, _escape(event.source), _escape(event.detail))
    return "\t".join(fields)


def parse_audit_line(line: str) -> ThreatEvent:
    seq, at, kind, source, detail = line.rstrip("\n").split("\t")
    return ThreatEvent(at=int(at), kind=ThreatKind(kind), source=_unescape(source),
                       detail=_unescape(detail), seq=int(seq))


class AuditLog:
    """Append-only, thread-safe event log, optionally mirrored to a file."""

    def __init__(self, mirror: Optional[Union[str, Path]] = None):
        self._entries: list[ThreatEvent] = []
        self._lock = threading.Lock()
        self.mirror = Path(mirror) if mirror is not None else None
        self.mirror_failures = 0

    def append(self, event: ThreatEvent) -> int:
        with self._lock:
            seq = len(self._entries) + 1
            stored = replace(event, seq=seq)
            self._entries.append(stored)
            if self.mirror is None:
                return seq
            try:
                with open(self.mirror, "a", encoding="utf-8") as fh:
                    fh.write(format_audit_line(stored) + "\n")
            except OSError as exc:
                self.mirror_failures += 1
                raise AuditIOError(seq, exc) from exc
        return seq

    def __call__(self, event: ThreatEvent) -> None:
        try:
            self.append(event)
        except AuditIOError as exc:
            logger.error("%s", exc)

    def __len__(self) -> int:
        return len(self._entries)

    def __getitem__(self, index):
        return self._entries[index]

    def __iter__(self):
        return iter(list(self._entries))

    def entries(self, kind: Optional[ThreatKind] = None) -> list[ThreatEvent]:
        with self._lock:
            return [e for e in self._entries if kind is None or e.kind is kind]


def audit_append(log: AuditLog, event: ThreatEvent) -> int:
    return log.append(event)


def fan_out(*sinks: Optional[EventSink]) -> EventSink:
    live: Iterable[EventSink] = [s for s in sinks if s is not None]

    def sink(event: ThreatEvent) -> None:
        for s in live:
            s(event)

    return sink
