"""Per-source sliding-window rate limiting with fixed-duration bans."""
from __future__ import annotations

import threading
from collections import OrderedDict, deque
from dataclasses import dataclass, field
from typing import Optional

from .domain import EventSink, Layer, ThreatKind, Verdict, emit


@dataclass(frozen=True)
class RateLimitConfig:
    max_requests: int = 100
    window: int = 10_000  # ms
    ban_duration: int = 60_000  # ms
    max_tracked_sources: int = 100_000

    def __post_init__(self):
        if self.max_requests <= 0 or self.window <= 0:
            raise ValueError("max_requests and window must be positive")
        if self.ban_duration < self.window:
            raise ValueError("ban_duration must be at least the window")
        if self.max_tracked_sources <= 0:
            raise ValueError("max_tracked_sources must be positive")


@dataclass
class SourceState:
    timestamps: deque = field(default_factory=deque)
    banned_until: Optional[int] = None
    last_seen: int = 0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)


def source_host(source: str) -> str:
    """Strip the port so a client cannot dodge its limit by reconnecting."""
    if source.startswith("["):
        return source[1:source.find("]")] if "]" in source else source
    if source.count(":") == 1:
        return source.rsplit(":", 1)[0]
    return source


class DosGuard:
    def __init__(self, cfg: RateLimitConfig = RateLimitConfig(), events: Optional[EventSink] = None):
        self.cfg = cfg
        self.events = events
        self._sources: "OrderedDict[str, SourceState]" = OrderedDict()
        self._table_lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._sources)

    def state(self, source: str) -> Optional[SourceState]:
        return self._sources.get(source_host(source))

    def _state_for(self, key: str, now: int) -> Optional[SourceState]:
        with self._table_lock:
            st = self._sources.get(key)
            if st is not None:
                self._sources.move_to_end(key)
                return st
            if len(self._sources) >= self.cfg.max_tracked_sources and not self._evict_one(now):
                return None
            st = self._sources[key] = SourceState(last_seen=now)
            return st

    def _evict_one(self, now: int) -> bool:
        # least recently active first; banned sources are never dropped early
        for key, st in self._sources.items():
            if st.banned_until is None or st.banned_until <= now:
                del self._sources[key]
                return True
        return False

    def record_and_check(self, source: str, now: int, events: Optional[EventSink] = None) -> Verdict:
        events = events if events is not None else self.events
        key = source_host(source)
        st = self._state_for(key, now)
        if st is None:
            emit(events, now, ThreatKind.RATE_EXCEEDED, source, "source table full")
            return Verdict.deny(Layer.DOS_GUARD, "capacity", "too many tracked sources")
        cfg = self.cfg
        with st.lock:
            st.last_seen = now
            if st.banned_until is not None:
                if st.banned_until > now:
                    return Verdict.deny(Layer.DOS_GUARD, "banned", f"banned until {st.banned_until}")
                st.banned_until = None
            ts = st.timestamps
            while ts and ts[0] <= now - cfg.window:
                ts.popleft()
            if len(ts) + 1 > cfg.max_requests:
                st.banned_until = now + cfg.ban_duration
                ts.clear()
                banned = True
            else:
                ts.append(now)
                banned = False
        if banned:
            emit(events, now, ThreatKind.RATE_EXCEEDED, source,
                 f"more than {cfg.max_requests} requests in {cfg.window} ms")
            return Verdict.deny(Layer.DOS_GUARD, "rate-exceeded", "request rate exceeded")
        return Verdict.allow(Layer.DOS_GUARD)

    def purge(self, now: int) -> int:
        evicted = 0
        with self._table_lock:
            for key in list(self._sources):
                st = self._sources[key]
                with st.lock:
                    if st.banned_until is not None and st.banned_until > now:
                        continue
                    if any(t > now - self.cfg.window for t in st.timestamps):
                        continue
                    del self._sources[key]
                    evicted += 1
        return evicted
