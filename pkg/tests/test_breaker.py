import io
import random
import threading

import pytest

from oracles import replay_oracle
from sentinel.breaker import (
    RESET_PERMISSION, CooldownActive, DetectionPolicy, LinkState, NotIsolated, PermissionDenied, TierBreaker,
    TierIsolated,
)
from sentinel.domain import AuditLog, ThreatEvent, ThreatKind

POLICY = DetectionPolicy(threshold=3, window=5_000, cooldown=30_000)


def ev(kind=ThreatKind.FORGERY, at=0):
    return ThreatEvent(at, kind, "10.0.0.9")


def admin_only(operator, permission):
    return operator == "ops" and permission == RESET_PERMISSION


def test_three_events_trip():
    log, out = AuditLog(), io.StringIO()
    b = TierBreaker(POLICY, events=log, notify=out)
    for t in (0, 1000):
        assert b.observe(ev(at=t), t).state is LinkState.CONNECTED
    link = b.observe(ev(at=2000), 2000)
    assert (link.state, link.tripped_at, link.trip_count) == (LinkState.ISOLATED, 2000, 1)
    assert [e.kind for e in log] == [ThreatKind.BREAKER_TRIP]
    assert out.getvalue().startswith("TRIP 2000 ")


def test_spread_events_stay_connected():
    b = TierBreaker(POLICY)
    for t in (0, 5000, 10_000):
        b.observe(ev(at=t), t)
    assert not b.isolated


def test_unwatched_kinds_ignored():
    b = TierBreaker(POLICY)
    for t in range(10):
        b.observe(ev(ThreatKind.RATE_EXCEEDED, t), t)
    assert not b.isolated


def test_one_trip_per_episode():
    log = AuditLog()
    b = TierBreaker(POLICY, events=log)
    for t in range(50):
        b(ev(at=t))
    assert len(log.entries(ThreatKind.BREAKER_TRIP)) == 1


def test_guard_query():
    b = TierBreaker(POLICY)
    assert b.guard_query(lambda: 42) == 42
    for t in range(3):
        b.observe(ev(at=t), t)
    ran = []
    with pytest.raises(TierIsolated):
        b.guard_query(lambda: ran.append(1))
    assert ran == [] and b.refused == 1


def test_reset_rules():
    log = AuditLog()
    b = TierBreaker(POLICY, authorize=admin_only, events=log)
    with pytest.raises(NotIsolated):
        b.reset(0, "ops")
    for t in range(3):
        b.observe(ev(at=t), t)
    with pytest.raises(PermissionDenied):
        b.reset(10**9, "alice")
    assert log.entries(ThreatKind.PERMISSION_DENIED)
    with pytest.raises(CooldownActive):
        b.reset(2 + 30_000 - 1, "ops")
    link = b.reset(2 + 30_000, "ops")
    assert link.state is LinkState.CONNECTED and link.trip_count == 1
    # counts were cleared: two more events do not trip
    b.observe(ev(at=30_003), 30_003)
    b.observe(ev(at=30_004), 30_004)
    assert not b.isolated


def test_trip_time_matches_replay_oracle():
    rng = random.Random(17)
    kinds = list(ThreatKind)
    for _ in range(100):
        policy = DetectionPolicy(threshold=rng.randrange(1, 6), window=rng.choice([100, 1000, 5000]))
        b = TierBreaker(policy)
        now, watched = 0, []
        tripped_at = None
        for _ in range(rng.randrange(1, 60)):
            now += rng.choice([0, 10, 100, 400, 2000, 6000])
            kind = rng.choice(kinds)
            if kind in policy.watched_kinds:
                watched.append(now)
            link = b.observe(ThreatEvent(now, kind, "s"), now)
            if tripped_at is None and link.state is LinkState.ISOLATED:
                tripped_at = link.tripped_at
        assert tripped_at == replay_oracle(watched, policy)


def test_no_query_runs_after_trip_under_concurrency():
    b = TierBreaker(DetectionPolicy(threshold=1, window=1000))
    ran_after = []
    stop = threading.Event()

    def query():
        if b.isolated:
            ran_after.append(1)
        return 1

    def worker():
        while not stop.is_set():
            try:
                b.guard_query(query)
            except TierIsolated:
                pass

    threads = [threading.Thread(target=worker) for _ in range(4)]
    for t in threads:
        t.start()
    b.observe(ev(at=0), 0)
    stop.set()
    for t in threads:
        t.join()
    assert ran_after == []
