"""Rule language for describing abnormal requests: lexer, parser, serializer, evaluator.

One rule per line::

    rule "xss-1" target:body op:rx "(?i)<script" action:deny severity:5

Rules are tried in file order and the first terminal match (deny or allow)
decides. ``log`` rules record an event and evaluation continues.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional, Union

from .domain import EventSink, Layer, Request, ThreatKind, Verdict, emit

OPERATORS = ("rx", "contains", "eq", "len_gt", "absent")
ACTIONS = ("deny", "allow", "log")
SCALAR_TARGETS = ("path", "body", "source", "action", "query.any")
NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")
DEFAULT_BODY_LIMIT = 1 << 20
EXCERPT_LEN = 128


class ParseError(Exception):
    def __init__(self, message: str, line: int, column: int, token: str = "", expected: str = ""):
        self.message = message
        self.line = line
        self.column = column
        self.token = token
        self.expected = expected
        text = f"line {line}, column {column}: {message}"
        if token:
            text += f" (got {token!r})"
        if expected:
            text += f"; expected {expected}"
        super().__init__(text)


@dataclass(frozen=True)
class Rule:
    id: str
    target: str
    operator: str
    argument: Union[str, int, None]
    action: str
    severity: int
    line: int = field(default=0, compare=False)

    @property
    def pattern(self) -> "re.Pattern":
        return _compile(self.argument)


@dataclass(frozen=True)
class RuleSet:
    rules: tuple = ()
    source_name: str = "<memory>"
    version: str = ""

    def __len__(self) -> int:
        return len(self.rules)

    def __iter__(self):
        return iter(self.rules)


@dataclass(frozen=True)
class MatchResult:
    matched_rule: Optional[str]
    verdict: Verdict
    matched_value: str = ""
    logged: tuple = ()


_pattern_cache: dict = {}


def _compile(pattern: str) -> "re.Pattern":
    rx = _pattern_cache.get(pattern)
    if rx is None:
        rx = _pattern_cache[pattern] = re.compile(pattern)
    return rx


# ---------------------------------------------------------------------------
# lexing

@dataclass(frozen=True)
class Token:
    kind: str  # "word" | "string"
    text: str
    column: int


_ESCAPES = {'"': '"', "\\": "\\", "n": "\n", "t": "\t", "r": "\r"}


def _tokenize(line: str, lineno: int) -> list[Token]:
    tokens = []
    i, n = 0, len(line)
    while i < n:
        ch = line[i]
        if ch in " \t":
            i += 1
            continue
        start = i
        if ch == '"':
            i += 1
            buf = []
            while True:
                if i >= n:
                    raise ParseError("unterminated string", lineno, start + 1, line[start:], 'closing "')
                c = line[i]
                if c == '"':
                    i += 1
                    break
                if c == "\\" and i + 1 < n:
                    nxt = line[i + 1]
                    if nxt in _ESCAPES:
                        buf.append(_ESCAPES[nxt])
                    else:
                        # unknown escapes stay literal so regexes like \d read naturally
                        buf.append(c + nxt)
                    i += 2
                    continue
                buf.append(c)
                i += 1
            if i < n and line[i] not in " \t":
                raise ParseError("missing space after string", lineno, i + 1, line[i], "whitespace")
            tokens.append(Token("string", "".join(buf), start + 1))
        else:
            while i < n and line[i] not in " \t":
                i += 1
            tokens.append(Token("word", line[start:i], start + 1))
    return tokens


def _quote(text: str) -> str:
    out = text.replace("\\", "\\\\").replace('"', '\\"')
    out = out.replace("\n", "\\n").replace("\t", "\\t").replace("\r", "\\r")
    return f'"{out}"'


# ---------------------------------------------------------------------------
# parsing

class _LineParser:
    def __init__(self, tokens: list[Token], lineno: int, line: str):
        self.tokens = tokens
        self.pos = 0
        self.lineno = lineno
        self.eol = len(line.rstrip()) + 1

    def error(self, message: str, expected: str, tok: Optional[Token] = None) -> ParseError:
        if tok is None:
            return ParseError(message, self.lineno, self.eol, "<end of line>", expected)
        return ParseError(message, self.lineno, tok.column, tok.text, expected)

    def next(self, expected: str) -> Token:
        if self.pos >= len(self.tokens):
            raise self.error("unexpected end of line", expected)
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def peek(self) -> Optional[Token]:
        return self.tokens[self.pos] if self.pos < len(self.tokens) else None

    def keyword_value(self, key: str) -> Token:
        """Read ``key:value`` (also accepting ``key: value``)."""
        tok = self.next(f"'{key}:'")
        prefix = key + ":"
        if tok.kind != "word" or not tok.text.startswith(prefix):
            raise self.error(f"expected '{prefix}'", f"'{prefix}'", tok)
        value = tok.text[len(prefix):]
        if value:
            return Token("word", value, tok.column + len(prefix))
        nxt = self.next(f"value after '{prefix}'")
        if nxt.kind != "word":
            raise self.error(f"expected a bare value after '{prefix}'", "a bare word", nxt)
        return nxt

    def integer(self, tok: Token, what: str) -> int:
        if tok.kind != "word" or not re.fullmatch(r"[0-9]+", tok.text):
            raise self.error(f"expected an integer {what}", "decimal integer", tok)
        return int(tok.text)

    def parse(self) -> Rule:
        kw = self.next("'rule'")
        if kw.kind != "word" or kw.text != "rule":
            raise self.error("expected 'rule'", "'rule'", kw)
        id_tok = self.next("quoted rule id")
        if id_tok.kind != "string" or not id_tok.text:
            raise self.error("expected a non-empty quoted rule id", "quoted rule id", id_tok)

        tgt = self.keyword_value("target")
        target = _check_target(tgt.text)
        if target is None:
            raise self.error(f"unknown target {tgt.text!r}", "path|body|source|action|query.any|query.<key>|header.<name>", tgt)

        op_tok = self.keyword_value("op")
        if op_tok.text not in OPERATORS:
            raise self.error(f"unknown operator {op_tok.text!r}", "|".join(OPERATORS), op_tok)
        op = op_tok.text

        argument: Union[str, int, None] = None
        if op in ("rx", "contains", "eq"):
            arg = self.next("quoted argument")
            if arg.kind != "string":
                raise self.error(f"operator {op} takes a quoted argument", "quoted string", arg)
            argument = arg.text
            if op == "rx":
                try:
                    re.compile(argument)
                except re.error as exc:
                    raise self.error(f"regular expression does not compile: {exc}", "valid regex", arg)
        elif op == "len_gt":
            argument = self.integer(self.next("integer argument"), "length")

        act = self.keyword_value("action")
        if act.text not in ACTIONS:
            raise self.error(f"unknown action {act.text!r}", "deny|allow|log", act)

        sev_tok = self.keyword_value("severity")
        severity = self.integer(sev_tok, "severity")
        if not 1 <= severity <= 5:
            raise self.error("severity out of range", "1..5", sev_tok)

        extra = self.peek()
        if extra is not None and not (extra.kind == "word" and extra.text.startswith("#")):
            raise self.error("trailing input after rule", "end of line", extra)
        return Rule(id_tok.text, target, op, argument, act.text, severity, self.lineno)


def _check_target(text: str) -> Optional[str]:
    if text in SCALAR_TARGETS:
        return text
    if text.startswith("query.") and NAME_RE.match(text[6:]):
        return text
    if text.startswith("header.") and NAME_RE.match(text[7:]):
        return text.lower()
    return None


def parse_rules(text: str, source_name: str = "<memory>") -> RuleSet:
    rules = []
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        tokens = _tokenize(line, lineno)
        rule = _LineParser(tokens, lineno, line).parse()
        if rule.id in seen:
            raise ParseError(f"duplicate rule id {rule.id!r} (first defined on line {seen[rule.id]})",
                             lineno, tokens[1].column, rule.id, "a unique id")
        seen[rule.id] = lineno
        rules.append(rule)
    version = hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]
    return RuleSet(tuple(rules), source_name, version)


def serialize_rule(rule: Rule) -> str:
    parts = ["rule", _quote(rule.id), f"target:{rule.target}", f"op:{rule.operator}"]
    if rule.operator == "len_gt":
        parts.append(str(rule.argument))
    elif rule.operator != "absent":
        parts.append(_quote(rule.argument))
    parts += [f"action:{rule.action}", f"severity:{rule.severity}"]
    return " ".join(parts)


def serialize_rules(ruleset: RuleSet) -> str:
    return "".join(serialize_rule(r) + "\n" for r in ruleset.rules)


def load_starter_pack() -> RuleSet:
    text = resources.files("sentinel.data").joinpath("starter.wsr").read_text(encoding="utf-8")
    return parse_rules(text, "starter.wsr")


# ---------------------------------------------------------------------------
# evaluation

def select(req: Request, target: str, body_limit: int = DEFAULT_BODY_LIMIT) -> list[str]:
    """Values a target selects; an empty list means the field is absent."""
    if target == "body":
        return [req.body_text(body_limit)] if req.body else []
    if target == "path":
        return [req.path] if req.path else []
    if target == "source":
        return [req.source] if req.source else []
    if target == "action":
        return [req.action] if req.action else []
    if target == "query.any":
        return req.query_values()
    if target.startswith("query."):
        return req.query_values(target[len("query."):])
    if target.startswith("header."):
        return req.header(target[len("header."):])
    raise ValueError(f"unknown target {target!r}")


def _length(req: Request, target: str, value: str) -> int:
    # the body length is the full byte count, so over-cap bodies stay visible
    return len(req.body) if target == "body" else len(value)


def match_rule(rule: Rule, req: Request, body_limit: int = DEFAULT_BODY_LIMIT) -> Optional[str]:
    """Return the offending value if ``rule`` matches ``req``, else None."""
    values = select(req, rule.target, body_limit)
    op = rule.operator
    if op == "absent":
        return "" if not values else None
    for value in values:
        if op == "rx":
            hit = rule.pattern.search(value) is not None
        elif op == "contains":
            hit = rule.argument in value
        elif op == "eq":
            hit = value == rule.argument
        else:
            hit = _length(req, rule.target, value) > rule.argument
        if hit:
            return value
    return None


def evaluate(req: Request, rules: RuleSet, events: Optional[EventSink] = None,
             body_limit: int = DEFAULT_BODY_LIMIT) -> MatchResult:
    logged = []
    for rule in rules.rules:
        value = match_rule(rule, req, body_limit)
        if value is None:
            continue
        excerpt = value[:EXCERPT_LEN]
        if rule.action == "log":
            logged.append(rule.id)
            emit(events, req.received_at, ThreatKind.RULE_MATCH, req.source, f"log {rule.id}: {excerpt}")
            continue
        if rule.action == "allow":
            return MatchResult(rule.id, Verdict.allow(Layer.RULE_ENGINE, "rule-allow", rule.id),
                               excerpt, tuple(logged))
        emit(events, req.received_at, ThreatKind.RULE_MATCH, req.source, f"deny {rule.id}: {excerpt}")
        verdict = Verdict.deny(Layer.RULE_ENGINE, "rule-match", f"matched rule {rule.id}", rule_id=rule.id)
        return MatchResult(rule.id, verdict, excerpt, tuple(logged))
    return MatchResult(None, Verdict.allow(Layer.RULE_ENGINE, "no-match"), "", tuple(logged))
