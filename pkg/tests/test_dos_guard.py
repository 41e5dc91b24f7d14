import random

import pytest

from oracles import RecountOracle, random_stream
from sentinel.domain import AuditLog, ThreatKind
from sentinel.dos_guard import DosGuard, RateLimitConfig, source_host


def test_threshold_example():
    g = DosGuard(RateLimitConfig(max_requests=5, window=10_000, ban_duration=60_000))
    assert all(g.record_and_check("a", t * 1000).allowed for t in range(5))
    v = g.record_and_check("a", 5000)
    assert (v.allowed, v.reason) == (False, "rate-exceeded")


def test_ban_boundary_and_idempotence():
    log = AuditLog()
    g = DosGuard(RateLimitConfig(max_requests=1, window=100, ban_duration=1000), events=log)
    g.record_and_check("a", 0)
    assert g.record_and_check("a", 10).reason == "rate-exceeded"
    assert g.record_and_check("a", 500).reason == "banned"
    assert g.state("a").banned_until == 1010
    assert g.record_and_check("a", 1009).reason == "banned"
    assert g.record_and_check("a", 1010).allowed
    assert [e.kind for e in log] == [ThreatKind.RATE_EXCEEDED]


def test_port_is_ignored():
    assert source_host("10.0.0.1:5555") == "10.0.0.1"
    assert source_host("[::1]:80") == "::1"
    g = DosGuard(RateLimitConfig(max_requests=2, window=1000, ban_duration=1000))
    assert g.record_and_check("10.0.0.1:1", 0).allowed
    assert g.record_and_check("10.0.0.1:2", 0).allowed
    assert not g.record_and_check("10.0.0.1:3", 0).allowed


def test_config_validation():
    with pytest.raises(ValueError):
        RateLimitConfig(window=0)
    with pytest.raises(ValueError):
        RateLimitConfig(window=10, ban_duration=5)


def test_recount_oracle_10k_events():
    rng = random.Random(99)
    cfg = RateLimitConfig(max_requests=7, window=300, ban_duration=900)
    g, o = DosGuard(cfg), RecountOracle(cfg)
    disagreements = 0
    granted = {}
    for source, now in random_stream(rng, 10_000):
        verdict = g.record_and_check(source, now).allowed
        if verdict != o.check(source_host(source), now):
            disagreements += 1
        if verdict:
            granted.setdefault(source_host(source), []).append(now)
    assert disagreements == 0
    # window exactness over every interval starting at a grant
    for times in granted.values():
        for i, t in enumerate(times):
            assert sum(1 for u in times[i:] if u < t + cfg.window) <= cfg.max_requests


def test_purge_examples():
    g = DosGuard(RateLimitConfig(max_requests=1, window=100, ban_duration=1000))
    g.record_and_check("idle", 0)
    g.record_and_check("banned", 0)
    g.record_and_check("banned", 1)
    assert g.purge(200) == 1
    assert g.state("idle") is None and g.state("banned") is not None
    assert g.purge(1001) == 1
    assert len(g) == 0


def test_purge_is_invisible():
    rng = random.Random(7)
    cfg = RateLimitConfig(max_requests=4, window=100, ban_duration=400)
    purged, plain = DosGuard(cfg), DosGuard(cfg)
    for i, (source, now) in enumerate(random_stream(rng, 5000, sources=8)):
        if i % 37 == 0:
            purged.purge(now)
        assert purged.record_and_check(source, now).allowed == plain.record_and_check(source, now).allowed


def test_memory_bound():
    cfg = RateLimitConfig(max_requests=1, window=10, ban_duration=10_000, max_tracked_sources=50)
    g = DosGuard(cfg)
    for i in range(500):
        g.record_and_check(f"10.1.{i // 256}.{i % 256}", i)
        assert len(g) <= 50
    # banned sources are kept; a full table of bans refuses newcomers
    full = DosGuard(RateLimitConfig(max_requests=1, window=10, ban_duration=10_000, max_tracked_sources=3))
    for s in "abc":
        full.record_and_check(s, 0)
        full.record_and_check(s, 0)
    v = full.record_and_check("d", 1)
    assert (v.allowed, v.reason) == (False, "capacity")
    assert all(full.state(s).banned_until for s in "abc")
