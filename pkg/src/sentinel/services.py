"""Business-service components reachable behind the gateway.

The mocks stand in for the trading-information, contract-management and
banking components; each records the requests it receives.
"""
from __future__ import annotations

import json
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .domain import Request
from .vault import NotFound

QUOTES = {"ACME": 101.25, "GLOBEX": 47.5, "INITECH": 12.0, "UMBRELLA": 230.75}
CONTRACTS = {"c-100": {"party": "ACME", "status": "active"},
             "c-101": {"party": "GLOBEX", "status": "draft"}}


class UpstreamError(Exception):
    pass


@dataclass
class ServiceContext:
    """What a handler may touch besides the request: the caller and the data tier."""

    subject: str
    now: int
    vault_get: Callable[[str], bytes]
    vault_put: Callable[[str, bytes], Any]


Handler = Callable[[Request, ServiceContext], Any]


@dataclass
class ServiceComponent:
    name: str
    actions: frozenset
    handler: Handler
    received: list = field(default_factory=list, repr=False)
    record: bool = True


def _trading(req: Request, ctx: ServiceContext):
    if req.action == "list_quotes":
        return {"quotes": [{"symbol": s, "price": p} for s, p in sorted(QUOTES.items())]}
    if req.action == "get_quote":
        symbol = (req.query_values("symbol") or [""])[0].upper()
        if symbol not in QUOTES:
            return {"symbol": symbol, "price": None}
        return {"symbol": symbol, "price": QUOTES[symbol]}
    if req.action == "search":
        return {"query": [[k, v] for k, v in req.query], "body": req.body_text()}
    raise UpstreamError(f"trading has no action {req.action}")


def _contracts(req: Request, ctx: ServiceContext):
    if req.action == "list_contracts":
        return {"contracts": sorted(CONTRACTS)}
    if req.action == "get_contract":
        cid = (req.query_values("id") or [""])[0]
        return {"id": cid, "contract": CONTRACTS.get(cid)}
    raise UpstreamError(f"contracts has no action {req.action}")


def _banking(req: Request, ctx: ServiceContext):
    account = f"acct:{ctx.subject}"
    if req.action == "balance":
        try:
            balance = int(ctx.vault_get(account).decode())
        except NotFound:
            balance = 0
        return {"account": ctx.subject, "balance": balance}
    if req.action == "deposit":
        amount = int((req.query_values("amount") or ["0"])[0] or 0)
        try:
            balance = int(ctx.vault_get(account).decode())
        except NotFound:
            balance = 0
        ctx.vault_put(account, str(balance + amount).encode())
        return {"account": ctx.subject, "balance": balance + amount}
    raise UpstreamError(f"banking has no action {req.action}")


MOCKS: dict[str, tuple[Handler, tuple[str, ...]]] = {
    "trading": (_trading, ("list_quotes", "get_quote", "search")),
    "contracts": (_contracts, ("list_contracts", "get_contract")),
    "banking": (_banking, ("balance", "deposit")),
}


def mock_service(kind: str, name: Optional[str] = None, actions=None) -> ServiceComponent:
    handler, default_actions = MOCKS[kind]
    return ServiceComponent(name or kind, frozenset(actions or default_actions), handler)


def mock_services() -> dict[str, ServiceComponent]:
    return {k: mock_service(k) for k in MOCKS}


def http_upstream(base_url: str, timeout: float = 10.0) -> Handler:
    """Forward to a network service. Only the canonical, sanitized request is sent on."""
    base = base_url.rstrip("/")

    def handler(req: Request, ctx: ServiceContext):
        raw = req.to_raw()
        url = base + raw.path + (f"?{raw.query_string}" if raw.query_string else "")
        headers = {k: v for k, v in req.headers if k not in ("host", "content-length", "x-ims-cert")}
        headers["x-authenticated-subject"] = ctx.subject
        fwd = urllib.request.Request(url, data=req.body or None, headers=headers, method=req.method)
        try:
            with urllib.request.urlopen(fwd, timeout=timeout) as resp:
                data = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise UpstreamError(str(exc)) from exc
        try:
            return json.loads(data)
        except ValueError:
            return data

    return handler
