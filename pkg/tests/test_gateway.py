import itertools
import json
import threading

import pytest

from sentinel.breaker import PermissionDenied
from sentinel.domain import LAYER_ORDER, Decision, Layer, RawRequest, ThreatKind
from sentinel.gateway import PermissionTable
from sentinel.harness import build_fixture
from sentinel.rules import Rule, RuleSet
from sentinel.sanitizer import PAPER_COMPAT
from sentinel.services import ServiceComponent


def call(fx, cert, service="trading", action="list_quotes", query="", body=b"", source="10.0.0.1:4000",
         path=None):
    headers = [("User-Agent", "test")]
    if cert is not None:
        headers.append(("X-IMS-Cert", cert))
    raw = RawRequest(source, path or f"/svc/{service}/{action}", "POST" if body else "GET", tuple(headers), body,
                     query)
    return fx.gateway.handle(raw, fx.clock.now)


def test_valid_request(fx, user_cert):
    resp = call(fx, user_cert())
    assert resp.status == 200 and resp.verdict.decision is Decision.ALLOW
    assert resp.json()["quotes"][0]["symbol"] == "ACME"
    assert resp.layers == LAYER_ORDER


def test_paper_example_reaches_service():
    with build_fixture(7, policy=PAPER_COMPAT) as fx:
        cert = fx.ims.mint_certificate(fx.user, fx.gateway.service_names(), fx.clock.now, 60_000).encode()
        resp = call(fx, cert, "trading", "search", "q=%23%40abc%2A")
        assert resp.status == 200
        assert fx.gateway.received("trading")[-1].query_values("q") == ["ABC"]


def deny_at(fx, user_cert, layer):
    gw = fx.gateway
    if layer is Layer.DOS_GUARD:
        for _ in range(gw.dos.cfg.max_requests):
            call(fx, user_cert(), source="10.9.9.9:1")
        gw.invocations.clear()
        return call(fx, user_cert(), source="10.9.9.9:1")
    if layer is Layer.SANITIZER:
        return call(fx, user_cert(), path="/svc/%zz/list_quotes")
    if layer is Layer.IMS:
        return call(fx, None)
    if layer is Layer.RULE_ENGINE:
        return call(fx, user_cert(), "trading", "search", "q=%3Cscript%3Ealert(1)%3C/script%3E")
    if layer is Layer.ACTION_FILTER:
        return call(fx, user_cert(), "trading", "drop_tables")
    if layer is Layer.PERMISSION:
        gw.set_permission("contracts.get_contract", "user", False, fx.admin)
        return call(fx, user_cert(), "contracts", "get_contract", "id=c-100")
    for t in range(gw.breaker.policy.threshold):
        call(fx, "forged-" + str(t))
    gw.invocations.clear()
    return call(fx, user_cert(), "banking", "balance")


@pytest.mark.parametrize("layer", list(Layer))
def test_short_circuit_counters(fx, user_cert, layer):
    resp = deny_at(fx, user_cert, layer)
    gw = fx.gateway
    assert resp.verdict.decision is Decision.DENY and resp.verdict.layer is layer
    idx = LAYER_ORDER.index(layer)
    assert resp.layers == LAYER_ORDER[:idx + 1]
    assert [gw.invocations[l] for l in LAYER_ORDER] == [1] * (idx + 1) + [0] * (len(LAYER_ORDER) - idx - 1)


def test_every_deny_is_audited(fx, user_cert):
    for layer in Layer:
        before = len(fx.gateway.audit)
        resp = deny_at(fx, user_cert, layer)
        assert len(fx.gateway.audit) > before, layer
        assert resp.verdict.decision is Decision.DENY
        fx.clock.advance(60_000)
        if fx.gateway.breaker.isolated:
            fx.gateway.reset_breaker(fx.clock.now, fx.admin)


def test_statuses(fx, user_cert):
    assert call(fx, None).status == 401
    assert call(fx, "garbage").status == 401
    assert call(fx, user_cert(), path="/svc/%zz/x").status == 400
    assert call(fx, user_cert(), "trading", "drop_tables").status == 403
    scoped = fx.ims.mint_certificate(fx.user, {"contracts"}, fx.clock.now, 1000).encode()
    resp = call(fx, scoped)
    assert (resp.status, resp.verdict.reason) == (403, "out-of-scope")


def test_rule_fault_fails_closed(fx, user_cert):
    fx.gateway.reload_rules(RuleSet((Rule("broken", "query.any", "rx", None, "deny", 1),)))
    resp = call(fx, user_cert(), "trading", "get_quote", "symbol=ACME")
    assert resp.verdict.decision is Decision.DENY
    assert (resp.verdict.layer, resp.verdict.reason, resp.status) == (Layer.RULE_ENGINE, "internal-error", 500)
    assert fx.gateway.audit.entries(ThreatKind.INTERNAL_ERROR)


def test_any_layer_fault_fails_closed(fx, user_cert, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("boom")
    for target in ("sentinel.gateway.check_action", "sentinel.gateway.sanitize_request"):
        with monkeypatch.context() as m:
            m.setattr(target, boom)
            assert call(fx, user_cert()).verdict.decision is Decision.DENY


def test_upstream_failure_hides_detail(fx, user_cert):
    def handler(req, ctx):
        raise ValueError("secret stack detail")
    fx.gateway._services["trading"] = ServiceComponent("trading", frozenset({"list_quotes"}), handler)
    resp = call(fx, user_cert())
    assert resp.status == 502 and b"secret" not in resp.body
    assert json.loads(resp.body) == {"error": "upstream failure"}


def test_banking_uses_vault_and_isolation(fx, user_cert):
    assert call(fx, user_cert(), "banking", "deposit", "amount=40").json()["balance"] == 40
    assert call(fx, user_cert(), "banking", "balance").json()["balance"] == 40
    ops = fx.gateway.vault.ops
    for t in range(3):
        call(fx, f"forged{t}")
    assert fx.gateway.breaker.isolated
    resp = call(fx, user_cert(), "banking", "balance")
    assert (resp.status, resp.verdict.reason) == (503, "tier-isolated")
    assert fx.gateway.vault.ops == ops
    # tier-1 services keep working
    assert call(fx, user_cert()).status == 200


def test_set_permission(fx, user_cert):
    gw = fx.gateway
    assert call(fx, user_cert(), "contracts", "list_contracts").status == 200
    gw.set_permission("contracts.list_contracts", "user", False, fx.admin)
    resp = call(fx, user_cert(), "contracts", "list_contracts")
    assert (resp.status, resp.verdict.reason) == (403, "permission")
    gw.set_permission("contracts.list_contracts", "user", True, fx.admin)
    assert call(fx, user_cert(), "contracts", "list_contracts").status == 200
    with pytest.raises(PermissionDenied):
        gw.set_permission("contracts.list_contracts", "user", True, fx.user)
    assert gw.audit.entries(ThreatKind.ADMIN)


def test_permission_table_exhaustive():
    functions = ["a.x", "a.y", "b.z"]
    classes = ["user", "admin"]
    cells = list(itertools.product(functions, classes))
    for mask in range(2 ** len(cells)):
        granted = {c for i, c in enumerate(cells) if mask >> i & 1}
        table = PermissionTable()
        for f, c in granted:
            table = table.with_change(f, c, True)
        assert PermissionTable.loads(table.dumps()) == table
        for f in functions + ["c.unlisted"]:
            for held in ([], ["user"], ["admin"], ["user", "admin"]):
                assert table.allows(f, held) == any((f, c) in granted for c in held)


def test_concurrent_handles_count_consistently(fx, user_cert):
    certs = [user_cert() for _ in range(80)]
    results = []
    lock = threading.Lock()

    def worker(chunk, i):
        for c in chunk:
            r = call(fx, c, source=f"10.3.{i}.1:1")
            with lock:
                results.append(r.status)

    threads = [threading.Thread(target=worker, args=(certs[i::4], i)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert results.count(200) == 80
    assert fx.gateway.invocations[Layer.BREAKER] == 80
