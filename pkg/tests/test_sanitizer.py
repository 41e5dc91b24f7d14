import random
import string
from urllib.parse import urlencode

import pytest
from hypothesis import given, strategies as st

from sentinel.domain import AuditLog, RawRequest, ThreatKind, canonicalize_request
from sentinel.sanitizer import PAPER_COMPAT, PRODUCTION, SanitizationPolicy, sanitize, sanitize_request

ALNUM = set(string.ascii_letters + string.digits)


def test_paper_example():
    assert sanitize("#@abc*", PAPER_COMPAT).cleaned == "ABC"


def test_empty():
    res = sanitize("", PAPER_COMPAT)
    assert (res.cleaned, res.removed_count) == ("", 0)


def test_replace_strategy():
    policy = SanitizationPolicy.parse("alnum+_", "replace:_")
    assert sanitize("a<b>", policy).cleaned == "a_b_"


def test_policy_validation():
    with pytest.raises(ValueError):
        SanitizationPolicy(replacement="#")
    with pytest.raises(ValueError):
        SanitizationPolicy(applies_to=frozenset())
    with pytest.raises(ValueError):
        SanitizationPolicy.parse("alnum", "squash")
    policy = SanitizationPolicy.parse("alnum+-_ ", "strip", "lower", ["query", "headers"])
    assert {"-", "_", " "} <= policy.alphabet


@given(st.text())
def test_cleaned_within_alphabet_and_idempotent(text):
    for policy in (PAPER_COMPAT, PRODUCTION):
        cleaned = sanitize(text, policy).cleaned
        assert all(ch in policy.alphabet for ch in cleaned)
        assert sanitize(cleaned, policy).cleaned == cleaned


def test_alphabet_oracle_random():
    rng = random.Random(5)
    for _ in range(1000):
        text = "".join(chr(rng.randrange(0, 0x3000)) for _ in range(rng.randrange(0, 30)))
        res = sanitize(text, PAPER_COMPAT)
        kept = [ch for ch in text if ch in ALNUM]
        assert res.cleaned == "".join(kept).upper()
        assert res.removed_count == len(text) - len(kept)


def _req(query="", body=b"", headers=(("User-Agent", "x<y>"),)):
    return canonicalize_request(RawRequest("1.1.1.1:9", "/svc/trading/search", "POST", headers, body, query, "r1"))


def test_request_paper_example():
    out = sanitize_request(_req("q=%23%40abc%2A"), PAPER_COMPAT)
    assert out.query == (("q", "ABC"),)


def test_clean_request_is_identity():
    req = _req("q=ABC", b"HELLO")
    assert sanitize_request(req, PAPER_COMPAT) == req


def test_headers_untouched_unless_targeted():
    req = _req("q=a", headers=(("User-Agent", "x<y>"), ("X-IMS-Cert", "ab+/=")))
    assert sanitize_request(req, PAPER_COMPAT).headers == req.headers
    policy = SanitizationPolicy(applies_to=frozenset({"headers"}))
    out = sanitize_request(req, policy)
    assert out.header("user-agent") == ["xy"]
    assert out.header("x-ims-cert") == ["ab+/="]


def test_invalid_utf8_body_left_alone_when_clean():
    req = _req(body=b"\xff\xfe")
    assert sanitize_request(req, PRODUCTION).body != req.body  # replacement chars are stripped
    clean = _req(body=b"plain text")
    assert sanitize_request(clean, PRODUCTION).body == b"plain text"


def test_report_event():
    log = AuditLog()
    policy = SanitizationPolicy(report=True)
    sanitize_request(_req("q=%3Cb%3E"), policy, events=log)
    assert [e.kind for e in log] == [ThreatKind.SANITIZED]
    sanitize_request(_req("q=b"), policy, events=log)
    assert len(log) == 1


queries = st.lists(st.tuples(st.text(string.ascii_letters, min_size=1, max_size=4), st.text(max_size=12)),
                   max_size=4)


@given(queries, st.binary(max_size=40))
def test_sanitize_request_idempotent(query, body):
    req = _req(urlencode(query), body)
    for policy in (PAPER_COMPAT, PRODUCTION, SanitizationPolicy(applies_to=frozenset({"headers", "path"}))):
        once = sanitize_request(req, policy)
        assert sanitize_request(once, policy) == once
