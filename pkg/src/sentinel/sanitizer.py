"""Character-policy input sanitization."""
from __future__ import annotations

import string
from dataclasses import dataclass, replace
from typing import Optional

from .domain import CERT_HEADER, EventSink, Request, ThreatKind, emit

LETTERS = "letters"
DIGITS = "digits"
SPACE = "space"
TARGETS = frozenset({"query", "body", "headers", "path"})
CASE_MODES = ("preserve", "upper", "lower")

_CLASS_CHARS = {LETTERS: string.ascii_letters, DIGITS: string.digits, SPACE: " "}


@dataclass(frozen=True)
class SanitizationPolicy:
    classes: frozenset = frozenset({LETTERS, DIGITS})
    extra: str = ""
    replacement: Optional[str] = None  # None means strip
    case_mode: str = "preserve"
    applies_to: frozenset = frozenset({"query", "body"})
    report: bool = False

    def __post_init__(self):
        unknown = set(self.classes) - set(_CLASS_CHARS)
        if unknown:
            raise ValueError(f"unknown character classes {sorted(unknown)}")
        if self.case_mode not in CASE_MODES:
            raise ValueError(f"case_mode must be one of {CASE_MODES}")
        if not self.applies_to or not set(self.applies_to) <= TARGETS:
            raise ValueError(f"applies_to must be a non-empty subset of {sorted(TARGETS)}")
        alphabet = self.alphabet
        if self.replacement is not None:
            if len(self.replacement) != 1 or self.replacement not in alphabet:
                raise ValueError("replacement must be a single allowed character")
        for ch in alphabet:
            if self._case(ch) not in alphabet:
                raise ValueError(f"case mapping takes {ch!r} outside the allowed alphabet")

    @property
    def alphabet(self) -> frozenset:
        chars = set(self.extra)
        for cls in self.classes:
            chars.update(_CLASS_CHARS[cls])
        return frozenset(chars)

    def _case(self, text: str) -> str:
        if self.case_mode == "upper":
            return text.upper()
        if self.case_mode == "lower":
            return text.lower()
        return text

    @classmethod
    def parse(cls, allowed: str = "alnum", strategy: str = "strip", case: str = "preserve",
              targets=("query", "body"), report: bool = False) -> "SanitizationPolicy":
        """Build a policy from the config-file spelling (``alnum+<chars>``, ``replace:<c>``)."""
        base, plus, extra = allowed.partition("+")
        if base != "alnum":
            raise ValueError(f"allowed must be 'alnum' or 'alnum+<chars>', got {allowed!r}")
        if plus and not extra:
            raise ValueError("'alnum+' needs at least one extra character")
        classes = {LETTERS, DIGITS}
        if " " in extra:
            classes.add(SPACE)
            extra = extra.replace(" ", "")
        if strategy == "strip":
            replacement = None
        elif strategy.startswith("replace:") and len(strategy) == len("replace:") + 1:
            replacement = strategy[-1]
        else:
            raise ValueError(f"strategy must be 'strip' or 'replace:<c>', got {strategy!r}")
        return cls(frozenset(classes), extra, replacement, case, frozenset(targets), report)


# '#@abc*' -> 'ABC'
PAPER_COMPAT = SanitizationPolicy(case_mode="upper", applies_to=frozenset({"query", "body"}))

# Printable ASCII survives so the rule engine still sees request structure;
# control characters and non-ASCII are dropped.
PRODUCTION = SanitizationPolicy(
    classes=frozenset({LETTERS, DIGITS, SPACE}),
    extra="".join(sorted(set(string.punctuation))),
)


@dataclass(frozen=True)
class SanitizedInput:
    original: str
    cleaned: str
    removed_count: int


def sanitize(text: str, policy: SanitizationPolicy) -> SanitizedInput:
    alphabet = policy.alphabet
    out = []
    removed = 0
    for ch in text:
        if ch in alphabet:
            out.append(ch)
        else:
            removed += 1
            if policy.replacement is not None:
                out.append(policy.replacement)
    return SanitizedInput(text, policy._case("".join(out)), removed)


def sanitize_request(req: Request, policy: SanitizationPolicy, events: Optional[EventSink] = None) -> Request:
    removed = 0

    def clean(text: str) -> str:
        nonlocal removed
        res = sanitize(text, policy)
        removed += res.removed_count
        return res.cleaned

    changes = {}
    targets = policy.applies_to
    if "query" in targets:
        changes["query"] = tuple((k, clean(v)) for k, v in req.query)
    if "body" in targets and req.body:
        text = req.body.decode("utf-8", errors="replace")
        cleaned = clean(text)
        # leave untouched bodies byte-identical, even when not valid UTF-8
        if cleaned != text:
            changes["body"] = cleaned.encode("utf-8")
    if "headers" in targets:
        changes["headers"] = tuple((k, v if k == CERT_HEADER else clean(v)) for k, v in req.headers)
    if "path" in targets:
        segs = [clean(s) for s in req.path.split("/")[1:]]
        changes["path"] = "/" + "/".join(s for s in segs if s not in ("", ".", ".."))
    if not changes:
        return req
    out = replace(req, **changes)
    if removed and policy.report:
        emit(events, req.received_at, ThreatKind.SANITIZED, req.source, f"removed {removed} characters")
    return out
