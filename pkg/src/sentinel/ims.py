"""Identity management: principals, authentication certificates, replay defense."""
from __future__ import annotations

import base64
import binascii
import enum
import hashlib
import hmac
import json
import os
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from .domain import EventSink, SentinelError, ThreatKind, emit

NAME_RE = re.compile(r"^[A-Za-z0-9_.@-]{1,64}$")
NONCE_BYTES = 16
# nonces are kept this long past expiry before purge
PURGE_GRACE_MS = 60_000


class AuthError(SentinelError):
    pass


class AuthFailed(AuthError):
    pass


class PrincipalDisabled(AuthError):
    pass


class DuplicateId(AuthError):
    pass


class WeakSecret(AuthError):
    pass


class UnknownService(AuthError):
    pass


class CertificateError(AuthError):
    kind: ThreatKind = ThreatKind.FORGERY
    reason = "forged"


class ForgedCertificate(CertificateError):
    kind = ThreatKind.FORGERY
    reason = "forged"


class ExpiredCertificate(CertificateError):
    kind = ThreatKind.EXPIRED
    reason = "expired"


class ReplayedCertificate(CertificateError):
    kind = ThreatKind.REPLAY
    reason = "replayed"


class PrincipalKind(str, enum.Enum):
    USER = "User"
    SERVICE = "Service"


@dataclass(frozen=True)
class Principal:
    principal_id: str
    salt: str
    secret_hash: str
    kind: PrincipalKind
    enabled: bool = True
    groups: frozenset = frozenset()

    @property
    def classes(self) -> frozenset:
        return frozenset({self.kind.value.lower()}) | self.groups

    def to_json(self) -> dict:
        return {
            "id": self.principal_id,
            "salt": self.salt,
            "hash": self.secret_hash,
            "kind": self.kind.value,
            "enabled": self.enabled,
            "groups": sorted(self.groups),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Principal":
        return cls(d["id"], d["salt"], d["hash"], PrincipalKind(d["kind"]), d["enabled"],
                   frozenset(d.get("groups", ())))


@dataclass(frozen=True)
class AuthCertificate:
    subject: str
    scope: frozenset
    issued_at: int
    expires_at: int
    nonce: bytes
    single_use: bool
    tag: bytes = b""

    def payload(self) -> bytes:
        """The signed portion of the wire form (everything before ``;tag=``)."""
        scope = ",".join(sorted(self.scope))
        text = (f"v=1;sub={self.subject};scope={scope};iat={self.issued_at};"
                f"exp={self.expires_at};nonce={self.nonce.hex()};su={int(self.single_use)}")
        return text.encode("ascii")

    def encode(self) -> str:
        raw = self.payload() + b";tag=" + self.tag.hex().encode("ascii")
        return base64.b64encode(raw).decode("ascii")


_CERT_RE = re.compile(
    rb"^v=1;sub=(?P<sub>[A-Za-z0-9_.@-]{1,64});scope=(?P<scope>[A-Za-z0-9_.@,-]*);"
    rb"iat=(?P<iat>0|[1-9][0-9]{0,18});exp=(?P<exp>0|[1-9][0-9]{0,18});"
    rb"nonce=(?P<nonce>[0-9a-f]{32});su=(?P<su>[01]);tag=(?P<tag>[0-9a-f]{64})$"
)


def sign(key: bytes, payload: bytes) -> bytes:
    return hmac.new(key, payload, hashlib.sha256).digest()


def decode_certificate(encoded: Union[str, bytes]) -> AuthCertificate:
    """Parse the wire form without checking the tag. Any non-canonical input is refused."""
    if isinstance(encoded, str):
        try:
            encoded = encoded.encode("ascii")
        except UnicodeEncodeError as exc:
            raise ForgedCertificate("undecodable certificate") from exc
    try:
        raw = base64.b64decode(encoded, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise ForgedCertificate("undecodable certificate") from exc
    # b64decode ignores the unused low bits of the last quantum
    if base64.b64encode(raw) != encoded:
        raise ForgedCertificate("non-canonical encoding")
    m = _CERT_RE.match(raw)
    if m is None:
        raise ForgedCertificate("malformed certificate")
    scope_text = m["scope"].decode()
    scope = frozenset(s for s in scope_text.split(",") if s)
    cert = AuthCertificate(
        subject=m["sub"].decode(),
        scope=scope,
        issued_at=int(m["iat"]),
        expires_at=int(m["exp"]),
        nonce=bytes.fromhex(m["nonce"].decode()),
        single_use=m["su"] == b"1",
        tag=bytes.fromhex(m["tag"].decode()),
    )
    if cert.encode().encode("ascii") != encoded:
        raise ForgedCertificate("non-canonical certificate fields")
    return cert


def load_key_file(path: Union[str, Path]) -> bytes:
    text = Path(path).read_text().strip()
    if not re.fullmatch(r"[0-9a-fA-F]{64}", text):
        raise ValueError(f"{path}: key file must hold 64 hex characters")
    return bytes.fromhex(text)


def write_key_file(path: Union[str, Path], key: Optional[bytes] = None) -> bytes:
    key = key if key is not None else os.urandom(32)
    Path(path).write_text(key.hex() + "\n")
    return key


@dataclass
class NonceLedger:
    issued: dict = field(default_factory=dict)  # nonce -> expires_at
    consumed: set = field(default_factory=set)

    def purge(self, now: int, grace: int = PURGE_GRACE_MS) -> int:
        stale = [n for n, exp in self.issued.items() if exp + grace <= now]
        for n in stale:
            del self.issued[n]
            self.consumed.discard(n)
        return len(stale)


@dataclass(frozen=True)
class ServiceGrant:
    caller: str
    callee: str
    certificate: AuthCertificate


class IdentityService:
    """Registers principals and issues/validates authentication certificates.

    ``nonce_source`` and ``hash_iterations`` are injectable so tests and the
    evaluation harness can run deterministically and fast.
    """

    def __init__(
        self,
        signing_key: bytes,
        *,
        min_secret_len: int = 8,
        service_ttl: int = 300_000,
        hash_iterations: int = 200_000,
        nonce_source: Callable[[int], bytes] = os.urandom,
        events: Optional[EventSink] = None,
        principals_file: Optional[Union[str, Path]] = None,
    ):
        if len(signing_key) != 32:
            raise ValueError("signing key must be 32 bytes")
        self._key = signing_key
        self.min_secret_len = min_secret_len
        self.service_ttl = service_ttl
        self.hash_iterations = hash_iterations
        self._nonce_source = nonce_source
        self.events = events
        self.principals_file = Path(principals_file) if principals_file else None
        self._principals: dict[str, Principal] = {}
        self._grants: dict[tuple[str, str], ServiceGrant] = {}
        self.ledger = NonceLedger()
        self._lock = threading.Lock()
        if self.principals_file is not None and self.principals_file.exists():
            self._load_principals()

    # -- principals --------------------------------------------------------

    def _hash(self, secret: str, salt: bytes) -> str:
        return hashlib.pbkdf2_hmac("sha256", secret.encode("utf-8"), salt, self.hash_iterations).hex()

    def register_principal(self, principal_id: str, secret: str, kind: PrincipalKind,
                           groups: Iterable[str] = ()) -> Principal:
        if not NAME_RE.match(principal_id):
            raise ValueError(f"invalid principal id {principal_id!r}")
        if len(secret) < max(self.min_secret_len, 1):
            raise WeakSecret(f"secret shorter than {self.min_secret_len} characters")
        salt = os.urandom(16)
        principal = Principal(principal_id, salt.hex(), self._hash(secret, salt), PrincipalKind(kind),
                              True, frozenset(groups))
        with self._lock:
            if principal_id in self._principals:
                raise DuplicateId(principal_id)
            self._principals[principal_id] = principal
            self._save_principals()
        return principal

    def set_enabled(self, principal_id: str, enabled: bool) -> Principal:
        with self._lock:
            p = self._principals.get(principal_id)
            if p is None:
                raise AuthFailed("unknown principal")
            p = Principal(p.principal_id, p.salt, p.secret_hash, p.kind, enabled, p.groups)
            self._principals[principal_id] = p
            self._save_principals()
        return p

    def principal(self, principal_id: str) -> Optional[Principal]:
        return self._principals.get(principal_id)

    def principals(self) -> list[Principal]:
        return list(self._principals.values())

    def authenticate(self, principal_id: str, secret: str) -> Principal:
        p = self._principals.get(principal_id)
        if p is None:
            # burn the same work so unknown ids are not distinguishable by timing
            self._hash(secret, b"\x00" * 16)
            raise AuthFailed("authentication failed")
        if not hmac.compare_digest(self._hash(secret, bytes.fromhex(p.salt)), p.secret_hash):
            raise AuthFailed("authentication failed")
        if not p.enabled:
            raise PrincipalDisabled(principal_id)
        return p

    def _save_principals(self) -> None:
        if self.principals_file is None:
            return
        data = [p.to_json() for p in self._principals.values()]
        tmp = self.principals_file.with_suffix(".tmp")
        tmp.write_text(json.dumps(data, indent=1, sort_keys=True))
        tmp.replace(self.principals_file)

    def _load_principals(self) -> None:
        for d in json.loads(self.principals_file.read_text() or "[]"):
            p = Principal.from_json(d)
            self._principals[p.principal_id] = p

    # -- certificates ------------------------------------------------------

    def mint_certificate(self, subject: str, scope: Iterable[str], now: int, ttl: int,
                         single_use: bool = False) -> AuthCertificate:
        """Sign a certificate for an already-authenticated subject."""
        if ttl <= 0:
            raise ValueError("ttl must be positive")
        scope = frozenset(scope)
        for s in scope:
            if not NAME_RE.match(s) or "," in s:
                raise ValueError(f"invalid scope entry {s!r}")
        with self._lock:
            nonce = self._nonce_source(NONCE_BYTES)
            while nonce in self.ledger.issued:
                nonce = self._nonce_source(NONCE_BYTES)
            unsigned = AuthCertificate(subject, scope, now, now + ttl, nonce, single_use)
            cert = AuthCertificate(subject, scope, now, now + ttl, nonce, single_use,
                                   sign(self._key, unsigned.payload()))
            self.ledger.issued[nonce] = cert.expires_at
        return cert

    def issue_certificate(self, principal_id: str, secret: str, scope: Iterable[str], now: int,
                          ttl: int, single_use: bool = False) -> AuthCertificate:
        p = self.authenticate(principal_id, secret)
        return self.mint_certificate(p.principal_id, scope, now, ttl, single_use)

    def validate_certificate(self, encoded: Union[str, bytes], now: int, source: str = "",
                             events: Optional[EventSink] = None) -> tuple[str, frozenset]:
        try:
            return self._validate(encoded, now)
        except CertificateError as exc:
            emit(events if events is not None else self.events, now, exc.kind, source, str(exc))
            raise

    def _validate(self, encoded, now: int) -> tuple[str, frozenset]:
        cert = decode_certificate(encoded)
        if not hmac.compare_digest(sign(self._key, cert.payload()), cert.tag):
            raise ForgedCertificate("tag mismatch")
        if now >= cert.expires_at:
            raise ExpiredCertificate("certificate expired")
        with self._lock:
            if cert.nonce not in self.ledger.issued:
                # only a purged nonce can be unknown while the tag verifies
                raise ExpiredCertificate("certificate no longer known")
            if cert.single_use:
                if cert.nonce in self.ledger.consumed:
                    raise ReplayedCertificate("single-use certificate already used")
                self.ledger.consumed.add(cert.nonce)
        return cert.subject, cert.scope

    def purge(self, now: int) -> int:
        with self._lock:
            return self.ledger.purge(now)

    # -- service links -----------------------------------------------------

    def _service(self, name: str) -> Principal:
        p = self._principals.get(name)
        if p is None or p.kind is not PrincipalKind.SERVICE:
            raise UnknownService(name)
        return p

    def grant_service_link(self, caller: str, callee: str, now: int) -> ServiceGrant:
        self._service(caller)
        self._service(callee)
        cert = self.mint_certificate(caller, {callee}, now, self.service_ttl)
        grant = ServiceGrant(caller, callee, cert)
        with self._lock:
            self._grants[(caller, callee)] = grant
        return grant

    def accept_service_call(self, encoded: Optional[Union[str, bytes]], callee: str, now: int,
                            source: str = "") -> str:
        """Callee-side check of a service-to-service call. Returns the caller."""
        if not encoded:
            raise AuthFailed("no service certificate")
        caller, scope = self.validate_certificate(encoded, now, source)
        p = self._principals.get(caller)
        if p is None or p.kind is not PrincipalKind.SERVICE or callee not in scope:
            raise AuthFailed("service link not granted")
        if (caller, callee) not in self._grants:
            raise AuthFailed("service link not granted")
        return caller
