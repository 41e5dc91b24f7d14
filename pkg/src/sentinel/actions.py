"""Predefined action filter: an allow-list of (service, action) pairs."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional

from .domain import EventSink, Layer, Request, ThreatKind, Verdict, emit

USER_MESSAGE = "The requested operation is not available."


class RegistryParseError(ValueError):
    def __init__(self, line: int, text: str):
        super().__init__(f"line {line}: expected 'service action', got {text!r}")
        self.line = line


@dataclass(frozen=True)
class ActionRegistry:
    entries: frozenset = frozenset()
    version: str = ""

    def __contains__(self, pair) -> bool:
        service, action = pair
        return (service.lower(), action.lower()) in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def of(cls, pairs) -> "ActionRegistry":
        entries = frozenset((s.lower(), a.lower()) for s, a in pairs)
        digest = hashlib.sha256("\n".join(f"{s} {a}" for s, a in sorted(entries)).encode()).hexdigest()[:16]
        return cls(entries, digest)


def load_registry(text: str) -> ActionRegistry:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise RegistryParseError(lineno, stripped)
        pairs.append((parts[0], parts[1]))
    return ActionRegistry.of(pairs)


def check_action(req: Request, reg: ActionRegistry, events: Optional[EventSink] = None) -> Verdict:
    if (req.service, req.action) in reg:
        return Verdict.allow(Layer.ACTION_FILTER)
    emit(events, req.received_at, ThreatKind.UNKNOWN_ACTION, req.source,
         f"unknown action {req.service!r}/{req.action!r}")
    return Verdict.deny(Layer.ACTION_FILTER, "unknown-action", USER_MESSAGE)
