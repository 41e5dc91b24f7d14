"""IDS-driven circuit breaker isolating the business tier from the data tier.

Watched threat events are counted in a sliding window. Reaching the threshold
while connected isolates the data tier: every guarded query is refused until
an authorized operator resets the link after the cooldown.
"""
from __future__ import annotations

import enum
import logging
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, TextIO, TypeVar, Union

from .domain import EventSink, SentinelError, ThreatEvent, ThreatKind, emit

logger = logging.getLogger(__name__)

T = TypeVar("T")

DEFAULT_WATCHED = frozenset({ThreatKind.FORGERY, ThreatKind.REPLAY, ThreatKind.RULE_MATCH,
                             ThreatKind.TAMPERED_RECORD})
RESET_PERMISSION = "breaker.reset"


class BreakerError(SentinelError):
    pass


class TierIsolated(BreakerError):
    reason = "tier-isolated"


class CooldownActive(BreakerError):
    pass


class PermissionDenied(BreakerError):
    pass


class NotIsolated(BreakerError):
    pass


@dataclass(frozen=True)
class DetectionPolicy:
    threshold: int = 5
    window: int = 10_000
    watched_kinds: frozenset = DEFAULT_WATCHED
    cooldown: int = 30_000

    def __post_init__(self):
        if self.threshold < 1 or self.window <= 0 or self.cooldown < 0:
            raise ValueError("threshold >= 1, window > 0 and cooldown >= 0 required")


class LinkState(str, enum.Enum):
    CONNECTED = "Connected"
    ISOLATED = "Isolated"


@dataclass(frozen=True)
class TierLink:
    state: LinkState = LinkState.CONNECTED
    tripped_at: Optional[int] = None
    trip_reason: Optional[str] = None
    trip_count: int = 0


class TierBreaker:
    def __init__(
        self,
        policy: DetectionPolicy = DetectionPolicy(),
        *,
        authorize: Callable[[str, str], bool] = lambda operator, permission: False,
        events: Optional[EventSink] = None,
        notify: Optional[Union[TextIO, Callable[[str], None]]] = None,
    ):
        self.policy = policy
        self.authorize = authorize
        self.events = events
        self.notify = notify
        self._link = TierLink()
        self._recent: deque = deque()
        # reentrant: a guarded query may itself emit events that reach observe()
        self._lock = threading.RLock()
        self.forwarded = 0
        self.refused = 0

    @property
    def link(self) -> TierLink:
        return self._link

    @property
    def isolated(self) -> bool:
        return self._link.state is LinkState.ISOLATED

    def observe(self, event: ThreatEvent, now: int) -> TierLink:
        if event.kind not in self.policy.watched_kinds:
            return self._link
        with self._lock:
            recent = self._recent
            recent.append(now)
            while recent and recent[0] <= now - self.policy.window:
                recent.popleft()
            if self._link.state is LinkState.ISOLATED or len(recent) < self.policy.threshold:
                return self._link
            reason = f"{len(recent)} watched events in {self.policy.window} ms (last: {event.kind.value})"
            self._link = TierLink(LinkState.ISOLATED, now, reason, self._link.trip_count + 1)
            link = self._link
        logger.warning("tier link isolated: %s", reason)
        self._notify(f"TRIP {now} {reason}")
        emit(self.events, now, ThreatKind.BREAKER_TRIP, event.source, reason)
        return link

    def __call__(self, event: ThreatEvent) -> None:
        self.observe(event, event.at)

    def _notify(self, line: str) -> None:
        if self.notify is None:
            return
        try:
            if callable(self.notify):
                self.notify(line)
            else:
                self.notify.write(line + "\n")
                self.notify.flush()
        except OSError:
            logger.exception("trip notification failed")

    def guard_query(self, query: Callable[[], T]) -> T:
        """Run ``query`` against the data tier only while the link is connected."""
        with self._lock:
            if self._link.state is LinkState.ISOLATED:
                self.refused += 1
                logger.info("data-tier query refused: link isolated")
                raise TierIsolated("tier-isolated")
            self.forwarded += 1
            return query()

    def reset(self, now: int, operator: str) -> TierLink:
        if not self.authorize(operator, RESET_PERMISSION):
            emit(self.events, now, ThreatKind.PERMISSION_DENIED, operator, "breaker reset refused")
            raise PermissionDenied(f"{operator} may not reset the breaker")
        with self._lock:
            link = self._link
            if link.state is not LinkState.ISOLATED:
                raise NotIsolated("link is connected")
            if now < link.tripped_at + self.policy.cooldown:
                raise CooldownActive(f"cooldown ends at {link.tripped_at + self.policy.cooldown}")
            self._link = TierLink(LinkState.CONNECTED, None, None, link.trip_count)
            self._recent.clear()
        emit(self.events, now, ThreatKind.ADMIN, operator, "breaker reset")
        return self._link
