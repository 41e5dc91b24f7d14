"""Attack corpora for the threat catalog and an in-process evaluation driver.

Every corpus entry is labelled and checked by an independent per-module oracle
before the gateway sees it, so the report never grades unlabelled traffic.
"""
from __future__ import annotations

import base64
import enum
import hashlib
import hmac
import random
import shutil
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence
from urllib.parse import quote_plus

from . import rules as rule_engine
from .actions import ActionRegistry
from .breaker import DetectionPolicy, TierBreaker
from .domain import CERT_HEADER, AuditLog, Decision, RawRequest, canonicalize_request
from .dos_guard import DosGuard, RateLimitConfig
from .gateway import ADMIN_CLASS, Gateway, default_permissions
from .ims import AuthCertificate, ForgedCertificate, IdentityService, PrincipalKind, decode_certificate
from .sanitizer import PRODUCTION, sanitize_request
from .services import mock_services
from .vault import Vault, VaultKey

EPOCH = 1_700_000_000_000
USER_AGENT = "Mozilla/5.0 (X11; Linux x86_64) shop-client/2.1"
WORDS = ("red", "blue", "shoes", "laptop", "garden", "chair", "coffee", "lamp", "winter", "jacket",
         "organic", "tea", "desk", "phone", "case", "green", "small", "large", "gift", "card")
UNKNOWN_ACTIONS = ("drop_tables", "export_all", "debug", "shell", "admin_panel", "delete_account",
                   "dump_users", "set_price", "refund_all", "config")


class ScenarioKind(str, enum.Enum):
    FORGED_CERT = "ForgedCert"
    REPLAYED_CERT = "ReplayedCert"
    TAMPERED_CERT = "TamperedCert"
    INJECTION_PAYLOAD = "InjectionPayload"
    UNKNOWN_ACTION = "UnknownAction"
    FLOOD = "Flood"
    BENIGN = "Benign"


ALL_KINDS = tuple(ScenarioKind)


@dataclass(frozen=True)
class AttackScenario:
    kind: ScenarioKind
    seed: int = 7
    n: Optional[int] = None  # overrides the run-level count
    step_ms: Optional[int] = None  # clock advance between requests


def load_payloads() -> list[str]:
    text = resources.files("sentinel.data").joinpath("payloads.txt").read_text(encoding="utf-8")
    return [line for line in text.splitlines() if line and not line.startswith("#")]


class Clock:
    def __init__(self, start: int = EPOCH):
        self.now = start

    def advance(self, ms: int) -> int:
        self.now += ms
        return self.now


@dataclass
class Fixture:
    """A gateway wired with the starter pack, mock services and known principals."""

    gateway: Gateway
    clock: Clock
    signing_key: bytes
    user: str = "alice"
    admin: str = "ops"
    workdir: Optional[Path] = None

    @property
    def ims(self) -> IdentityService:
        return self.gateway.ims

    def close(self) -> None:
        if self.workdir is not None:
            shutil.rmtree(self.workdir, ignore_errors=True)
            self.workdir = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


EVAL_LIMITS = RateLimitConfig(max_requests=20, window=1_000, ban_duration=5_000)
EVAL_DETECTION = DetectionPolicy(threshold=3, window=5_000, cooldown=1_000)


def build_fixture(seed: int = 7, *, limits: RateLimitConfig = EVAL_LIMITS,
                  detection: DetectionPolicy = EVAL_DETECTION, policy=PRODUCTION) -> Fixture:
    signing_key = hashlib.sha256(f"sentinel-eval-ims-{seed}".encode()).digest()
    nonce_rng = random.Random(seed)
    ims = IdentityService(signing_key, hash_iterations=1_000, nonce_source=nonce_rng.randbytes)
    ims.register_principal("alice", "alice-secret-1", PrincipalKind.USER)
    ims.register_principal("ops", "ops-secret-123", PrincipalKind.USER, groups=[ADMIN_CLASS])
    services = mock_services()
    registry = ActionRegistry.of((name, a) for name, svc in services.items() for a in svc.actions)
    workdir = Path(tempfile.mkdtemp(prefix="sentinel-eval-"))
    vault_key = VaultKey(hashlib.sha256(f"sentinel-eval-vault-{seed}".encode()).digest())
    gateway = Gateway(
        ims=ims,
        rules=rule_engine.load_starter_pack(),
        registry=registry,
        dos=DosGuard(limits),
        breaker=TierBreaker(detection),
        permissions=default_permissions(registry),
        services=services,
        policy=policy,
        vault=Vault(workdir / "tier2.store", vault_key),
        vault_key=vault_key,
        audit=AuditLog(),
    )
    return Fixture(gateway, Clock(), signing_key, workdir=workdir)


# ---------------------------------------------------------------------------
# corpus generation

def _rng(scenario: AttackScenario) -> random.Random:
    return random.Random(f"{scenario.kind.value}:{scenario.seed}")


def _source(rng: random.Random) -> str:
    return f"10.{rng.randrange(256)}.{rng.randrange(256)}.{rng.randrange(1, 255)}:{rng.randrange(1024, 65536)}"


def _benign_call(rng: random.Random, registry: ActionRegistry) -> tuple[str, str, list, bytes]:
    service, action = rng.choice(sorted(registry.entries))
    query = []
    if action == "get_quote":
        query = [("symbol", rng.choice(["ACME", "GLOBEX", "INITECH"]))]
    elif action == "search":
        query = [("q", " ".join(rng.sample(WORDS, 2))), ("page", str(rng.randrange(1, 9)))]
    elif action == "get_contract":
        query = [("id", rng.choice(["c-100", "c-101"]))]
    elif action == "deposit":
        query = [("amount", str(rng.randrange(1, 500)))]
    body = b""
    if action == "search" and rng.random() < 0.5:
        body = f"note {rng.choice(WORDS)} order {rng.randrange(1000)}".encode()
    return service, action, query, body


def _raw(rid: str, source: str, service: str, action: str, query, body: bytes, cert: Optional[str]) -> RawRequest:
    headers = [("Host", "shop.example"), ("User-Agent", USER_AGENT)]
    if cert is not None:
        headers.append(("X-IMS-Cert", cert))
    qs = "&".join(f"{quote_plus(k)}={quote_plus(v)}" for k, v in query)
    return RawRequest(source=source, path=f"/svc/{service}/{action}", method="POST" if body else "GET",
                      headers=tuple(headers), body=body, query_string=qs, request_id=rid)


def _user_cert(fx: Fixture, *, single_use: bool = False) -> AuthCertificate:
    return fx.ims.mint_certificate(fx.user, fx.gateway.service_names(), fx.clock.now, 3_600_000, single_use)


def _flip_bit(text: str, rng: random.Random) -> str:
    data = bytearray(text.encode("ascii"))
    i = rng.randrange(len(data) * 8)
    data[i // 8] ^= 1 << (i % 8)
    return data.decode("latin-1")


def _tamper(cert: AuthCertificate, rng: random.Random) -> str:
    """Edit one signed field after signing, keeping the original tag."""
    edits = (
        lambda c: AuthCertificate("ops", c.scope, c.issued_at, c.expires_at, c.nonce, c.single_use, c.tag),
        lambda c: AuthCertificate(c.subject, c.scope | {"payroll"}, c.issued_at, c.expires_at, c.nonce, c.single_use, c.tag),
        lambda c: AuthCertificate(c.subject, c.scope, c.issued_at, c.expires_at + 86_400_000, c.nonce, c.single_use, c.tag),
        lambda c: AuthCertificate(c.subject, c.scope, c.issued_at - 1, c.expires_at, c.nonce, c.single_use, c.tag),
        lambda c: AuthCertificate(c.subject, c.scope, c.issued_at, c.expires_at, c.nonce, not c.single_use, c.tag),
        lambda c: AuthCertificate(c.subject, c.scope, c.issued_at, c.expires_at,
                                  bytes(b ^ 0xFF for b in c.nonce), c.single_use, c.tag),
    )
    return rng.choice(edits)(cert).encode()


def generate_corpus(scenario: AttackScenario, n: int, fx: Fixture) -> list[RawRequest]:
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng(scenario)
    registry = fx.gateway.registry
    kind = scenario.kind
    out = []
    if kind is ScenarioKind.REPLAYED_CERT:
        cert = _user_cert(fx, single_use=True).encode()
        service, action, query, body = _benign_call(rng, registry)
        raw = _raw("replay-0", _source(rng), service, action, query, body, cert)
        return [raw] * n
    flood_source = _source(rng)
    payloads = load_payloads()
    for i in range(n):
        rid = f"{kind.value.lower()}-{i}"
        service, action, query, body = _benign_call(rng, registry)
        source = _source(rng)
        if kind is ScenarioKind.FORGED_CERT:
            if i % 2 == 0:
                blob = rng.randbytes(rng.randrange(64, 513))
                cert = base64.b64encode(blob).decode()
            else:
                cert = _flip_bit(_user_cert(fx).encode(), rng)
        elif kind is ScenarioKind.TAMPERED_CERT:
            cert = _tamper(_user_cert(fx), rng)
        else:
            cert = _user_cert(fx).encode()
        if kind is ScenarioKind.INJECTION_PAYLOAD:
            payload = payloads[i % len(payloads)]
            service, action = "trading", "search"
            if i % 2 == 0:
                query, body = [("q", payload)], b""
            else:
                query, body = [("q", "shoes")], payload.encode()
        elif kind is ScenarioKind.UNKNOWN_ACTION:
            service = rng.choice(sorted({s for s, _ in registry.entries}))
            action = rng.choice(UNKNOWN_ACTIONS)
            query, body = [], b""
        elif kind is ScenarioKind.FLOOD:
            source = flood_source
        out.append(_raw(rid, source, service, action, query, body, cert))
    return out


# ---------------------------------------------------------------------------
# oracles

def cert_is_authentic(encoded: str, key: bytes) -> bool:
    """Independent MAC recomputation over the decoded fields."""
    try:
        cert = decode_certificate(encoded)
    except ForgedCertificate:
        return False
    expected = hmac.new(key, cert.payload(), hashlib.sha256).digest()
    return hmac.compare_digest(expected, cert.tag)


class UnsoundScenario(AssertionError):
    pass


def _cert_of(raw: RawRequest) -> Optional[str]:
    for k, v in raw.headers:
        if k.lower() == CERT_HEADER:
            return v
    return None


def verify_corpus(scenario: AttackScenario, corpus: Sequence[RawRequest], fx: Fixture) -> None:
    """Check every entry is what its label claims, using each layer's own module in isolation."""
    gw = fx.gateway
    kind = scenario.kind
    for raw in corpus:
        cert = _cert_of(raw)
        authentic = cert is not None and cert_is_authentic(cert, fx.signing_key)
        req = sanitize_request(canonicalize_request(raw, fx.clock.now), gw.policy)
        if kind in (ScenarioKind.FORGED_CERT, ScenarioKind.TAMPERED_CERT):
            ok = not authentic
        elif kind is ScenarioKind.REPLAYED_CERT:
            ok = authentic and decode_certificate(cert).single_use and len(set(corpus)) == 1
        elif kind is ScenarioKind.INJECTION_PAYLOAD:
            ok = authentic and not rule_engine.evaluate(req, gw.rules).verdict.allowed
        elif kind is ScenarioKind.UNKNOWN_ACTION:
            ok = authentic and (req.service, req.action) not in gw.registry
        else:
            ok = (authentic and rule_engine.evaluate(req, gw.rules).verdict.allowed
                  and (req.service, req.action) in gw.registry
                  and gw.permissions.allows(f"{req.service}.{req.action}", gw.classes_of(fx.user)))
            if kind is ScenarioKind.FLOOD:
                ok = ok and len({r.source for r in corpus}) == 1
        if not ok:
            raise UnsoundScenario(f"{kind.value} entry {raw.request_id} does not carry its label")


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class ScenarioResult:
    scenario: str
    sent: int = 0
    denied: int = 0
    allowed: int = 0
    layers: Counter = field(default_factory=Counter)
    reasons: Counter = field(default_factory=Counter)
    max_allowed_in_window: int = 0

    @property
    def block_rate(self) -> float:
        return self.denied / self.sent if self.sent else 0.0


@dataclass
class EvaluationReport:
    results: list = field(default_factory=list)
    trips: list = field(default_factory=list)  # (scenario, at, reason)

    def result(self, kind: ScenarioKind) -> ScenarioResult:
        for r in self.results:
            if r.scenario == kind.value:
                return r
        raise KeyError(kind)

    @property
    def benign_false_positive_rate(self) -> Optional[float]:
        try:
            return self.result(ScenarioKind.BENIGN).block_rate
        except KeyError:
            return None

    def records(self) -> str:
        return "".join(f"{r.scenario}\t{r.sent}\t{r.denied}\t{r.allowed}\t{r.block_rate:.4f}\n"
                       for r in self.results)

    def table(self) -> str:
        lines = [f"{'scenario':<18}{'sent':>7}{'denied':>8}{'allowed':>9}{'block_rate':>12}  deny layers"]
        for r in self.results:
            hist = ", ".join(f"{k}={v}" for k, v in sorted(r.layers.items())) or "-"
            lines.append(f"{r.scenario:<18}{r.sent:>7}{r.denied:>8}{r.allowed:>9}{r.block_rate:>12.4f}  {hist}")
        fp = self.benign_false_positive_rate
        if fp is not None:
            lines.append(f"benign false-positive rate: {fp:.4f}")
        lines.append(f"breaker trips: {len(self.trips)}")
        for scenario, at, reason in self.trips:
            lines.append(f"  {scenario} at {at}: {reason}")
        return "\n".join(lines) + "\n"


DEFAULT_STEP_MS = 100


def _settle(fx: Fixture) -> None:
    gw = fx.gateway
    fx.clock.advance(max(gw.dos.cfg.ban_duration, gw.dos.cfg.window,
                         gw.breaker.policy.window, gw.breaker.policy.cooldown) + 1)
    if gw.breaker.isolated:
        gw.reset_breaker(fx.clock.now, fx.admin)


def run_scenario(fx: Fixture, scenario: AttackScenario, n: int, report: EvaluationReport) -> ScenarioResult:
    gw = fx.gateway
    corpus = generate_corpus(scenario, n, fx)
    verify_corpus(scenario, corpus, fx)
    step = scenario.step_ms
    if step is None:
        step = 0 if scenario.kind is ScenarioKind.FLOOD else DEFAULT_STEP_MS
    res = ScenarioResult(scenario.kind.value)
    allowed_at: list[int] = []
    for raw in corpus:
        trips_before = gw.breaker.link.trip_count
        resp = gw.handle(raw, fx.clock.now)
        res.sent += 1
        if resp.verdict.decision is Decision.DENY:
            res.denied += 1
            res.layers[resp.verdict.layer.value] += 1
            res.reasons[resp.verdict.reason] += 1
        else:
            res.allowed += 1
            allowed_at.append(fx.clock.now)
        link = gw.breaker.link
        if link.trip_count > trips_before:
            report.trips.append((scenario.kind.value, link.tripped_at, link.trip_reason))
        fx.clock.advance(step)
    window = gw.dos.cfg.window
    res.max_allowed_in_window = max((sum(1 for t in allowed_at if s - window < t <= s) for s in allowed_at), default=0)
    report.results.append(res)
    _settle(fx)
    return res


def run_evaluation(fx: Fixture, scenarios: Sequence[AttackScenario], n: int = 200) -> EvaluationReport:
    report = EvaluationReport()
    for scenario in scenarios:
        count = scenario.n
        if count is None:
            count = 2 * fx.gateway.dos.cfg.max_requests if scenario.kind is ScenarioKind.FLOOD else n
        run_scenario(fx, scenario, count, report)
    return report


def check_expectations(report: EvaluationReport, fx: Fixture) -> list[str]:
    """Failures against the expected outcome of each scenario (empty when all hold)."""
    failures = []
    for r in report.results:
        kind = ScenarioKind(r.scenario)
        if kind in (ScenarioKind.FORGED_CERT, ScenarioKind.TAMPERED_CERT,
                    ScenarioKind.INJECTION_PAYLOAD, ScenarioKind.UNKNOWN_ACTION):
            if r.block_rate != 1.0:
                failures.append(f"{r.scenario}: block_rate {r.block_rate:.4f} != 1.0")
        elif kind is ScenarioKind.REPLAYED_CERT:
            if r.allowed != 1:
                failures.append(f"{r.scenario}: {r.allowed} allowed, expected exactly 1")
        elif kind is ScenarioKind.FLOOD:
            limit = fx.gateway.dos.cfg.max_requests
            if r.max_allowed_in_window > limit:
                failures.append(f"{r.scenario}: {r.max_allowed_in_window} allowed in one window > {limit}")
        elif kind is ScenarioKind.BENIGN and r.denied:
            failures.append(f"{r.scenario}: {r.denied} false positives")
    return failures


def scenarios_for(kinds: Sequence[ScenarioKind], seed: int) -> list[AttackScenario]:
    return [AttackScenario(k, seed) for k in kinds]
