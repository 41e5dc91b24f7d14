
import pytest

from sentinel.actions import USER_MESSAGE, ActionRegistry, RegistryParseError, check_action, load_registry
from sentinel.domain import AuditLog, RawRequest, ThreatKind, canonicalize_request

UNIVERSE = [("trading", "list_quotes"), ("trading", "get_quote"), ("contracts", "list_contracts"),
            ("contracts", "get_contract"), ("banking", "balance"), ("banking", "deposit")]


def req(service, action):
    return canonicalize_request(RawRequest("1.1.1.1:1", f"/svc/{service}/{action}"))


def test_load_examples():
    reg = load_registry("trading list_quotes\ntrading get_quote\n# comment\n\ntrading list_quotes\n")
    assert len(reg) == 2
    with pytest.raises(RegistryParseError) as err:
        load_registry("trading")
    assert err.value.line == 1


def test_check_examples():
    reg = load_registry("trading list_quotes\ntrading get_quote")
    assert check_action(req("trading", "list_quotes"), reg).allowed
    log = AuditLog()
    v = check_action(req("trading", "drop_tables"), reg, events=log)
    assert (v.allowed, v.reason, v.detail) == (False, "unknown-action", USER_MESSAGE)
    assert [e.kind for e in log] == [ThreatKind.UNKNOWN_ACTION]


def test_unrouted_path_denied():
    reg = ActionRegistry.of(UNIVERSE)
    assert not check_action(canonicalize_request(RawRequest("1.1.1.1:1", "/admin")), reg).allowed


def test_exhaustive_membership():
    disagreements = 0
    for mask in range(2 ** len(UNIVERSE)):
        subset = {p for i, p in enumerate(UNIVERSE) if mask >> i & 1}
        reg = ActionRegistry.of(subset)
        for pair in UNIVERSE:
            if check_action(req(*pair), reg).allowed != (pair in subset):
                disagreements += 1
    assert disagreements == 0


def test_version_tracks_content():
    a = ActionRegistry.of(UNIVERSE[:2])
    assert a.version == ActionRegistry.of(reversed(UNIVERSE[:2])).version
    assert a.version != ActionRegistry.of(UNIVERSE[:3]).version
