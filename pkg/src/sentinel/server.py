"""HTTP bindings: a public endpoint running the pipeline and a loopback admin endpoint."""
from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Callable
from urllib.parse import parse_qsl

from .breaker import BreakerError, PermissionDenied
from .domain import RawRequest, ThreatKind, emit
from .gateway import ADMIN_CLASS, Gateway
from .ims import AuthError, PrincipalKind

logger = logging.getLogger(__name__)

Clock = Callable[[], int]


def wall_clock() -> int:
    return int(time.time() * 1000)


def _params(body: bytes, content_type: str) -> dict:
    if not body:
        return {}
    if content_type.startswith("application/json"):
        data = json.loads(body)
        if not isinstance(data, dict):
            raise ValueError("expected a JSON object")
        return data
    return dict(parse_qsl(body.decode("utf-8"), keep_blank_values=True))


class AdminError(Exception):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


def _operator(gw: Gateway, params: dict, now: int) -> str:
    operator = params.get("operator", "")
    try:
        gw.ims.authenticate(operator, params.get("operator_secret", ""))
    except AuthError:
        emit(gw.audit, now, ThreatKind.PERMISSION_DENIED, operator or "-", "admin authentication failed")
        raise AdminError(401, "authentication failed")
    return operator


def _require_admin(gw: Gateway, params: dict, now: int) -> str:
    operator = _operator(gw, params, now)
    if ADMIN_CLASS not in gw.classes_of(operator):
        emit(gw.audit, now, ThreatKind.PERMISSION_DENIED, operator, "admin command refused")
        raise AdminError(403, "permission denied")
    return operator


def admin_command(gw: Gateway, command: str, params: dict, now: int) -> dict:
    """Run one admin command. Raises AdminError with an HTTP status on refusal."""
    ims = gw.ims
    if command == "user-add":
        admins = [p for p in ims.principals() if ADMIN_CLASS in p.classes]
        # the first administrator may be created from the loopback binding without credentials
        operator = _require_admin(gw, params, now) if admins else "bootstrap"
        groups = params.get("groups", [])
        if isinstance(groups, str):
            groups = [g for g in groups.split(",") if g]
        if not admins and ADMIN_CLASS not in groups:
            raise AdminError(409, "the first principal must be an administrator")
        p = ims.register_principal(params["id"], params["secret"], PrincipalKind(params.get("kind", "User")), groups)
        emit(gw.audit, now, ThreatKind.ADMIN, operator, f"user add {p.principal_id}")
        return {"id": p.principal_id, "kind": p.kind.value, "classes": sorted(p.classes)}
    if command == "user-disable":
        operator = _require_admin(gw, params, now)
        p = ims.set_enabled(params["id"], False)
        emit(gw.audit, now, ThreatKind.ADMIN, operator, f"user disable {p.principal_id}")
        return {"id": p.principal_id, "enabled": p.enabled}
    if command == "grant-link":
        operator = _require_admin(gw, params, now)
        grant = ims.grant_service_link(params["caller"], params["callee"], now)
        emit(gw.audit, now, ThreatKind.ADMIN, operator, f"grant-link {grant.caller}->{grant.callee}")
        return {"caller": grant.caller, "callee": grant.callee, "certificate": grant.certificate.encode(),
                "expires_at": grant.certificate.expires_at}
    if command == "permit":
        operator = _operator(gw, params, now)
        allowed = str(params.get("allowed", "true")).lower() in ("1", "true", "yes")
        table = gw.set_permission(params["function"], params["class"], allowed, operator, now)
        return {"function": params["function"], "classes": sorted(table.entries().get(params["function"], ()))}
    if command == "reset-breaker":
        operator = _operator(gw, params, now)
        link = gw.reset_breaker(now, operator)
        return {"state": link.state.value, "trip_count": link.trip_count}
    if command == "status":
        _require_admin(gw, params, now)
        link = gw.breaker.link
        return {"breaker": link.state.value, "trip_count": link.trip_count, "tripped_at": link.tripped_at,
                "rules": gw.rules.version, "registry": gw.registry.version, "audit_entries": len(gw.audit)}
    raise AdminError(404, f"unknown admin command {command!r}")


class _Handler(BaseHTTPRequestHandler):
    gateway: Gateway
    clock: Clock
    admin: bool
    server_version = "sentinel"
    sys_version = ""

    def log_message(self, fmt, *args):
        logger.debug("%s " + fmt, self.address_string(), *args)

    def _body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        return self.rfile.read(length) if length else b""

    def _send(self, status: int, body: bytes, content_type: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _dispatch(self) -> None:
        body = self._body()
        now = self.clock()
        source = f"{self.client_address[0]}:{self.client_address[1]}"
        if self.admin:
            return self._admin(body, now)
        if self.path.split("?")[0] == "/ims/login" and self.command == "POST":
            return self._login(body, now, source)
        raw = RawRequest(source=source, path=self.path, method=self.command,
                         headers=tuple(self.headers.items()), body=body)
        resp = self.gateway.handle(raw, now)
        self._send(resp.status, resp.body)

    def _login(self, body: bytes, now: int, source: str) -> None:
        gw = self.gateway
        verdict = gw.dos.record_and_check(source, now)
        if not verdict.allowed:
            return self._send(429, b'{"error": "too many requests"}')
        try:
            params = _params(body, self.headers.get("Content-Type", ""))
            scope = params.get("scope", ",".join(gw.service_names()))
            scope = scope.split(",") if isinstance(scope, str) else scope
            cert = gw.ims.issue_certificate(params.get("id", ""), params.get("secret", ""),
                                            [s for s in scope if s], now, int(params.get("ttl_ms", 300_000)),
                                            str(params.get("single_use", "false")).lower() in ("1", "true"))
        except (AuthError, ValueError) as exc:
            emit(gw.audit, now, ThreatKind.PERMISSION_DENIED, source, f"login failed: {type(exc).__name__}")
            return self._send(401, b'{"error": "authentication failed"}')
        self._send(200, json.dumps({"certificate": cert.encode(), "expires_at": cert.expires_at}).encode())

    def _admin(self, body: bytes, now: int) -> None:
        path = self.path.split("?")[0]
        if self.command != "POST" or not path.startswith("/admin/"):
            return self._send(404, b'{"error": "not found"}')
        try:
            params = _params(body, self.headers.get("Content-Type", "application/json"))
            result = admin_command(self.gateway, path[len("/admin/"):], params, now)
        except AdminError as exc:
            return self._send(exc.status, json.dumps({"error": str(exc)}).encode())
        except BreakerError as exc:
            status = 403 if isinstance(exc, PermissionDenied) else 409
            return self._send(status, json.dumps({"error": type(exc).__name__, "detail": str(exc)}).encode())
        except AuthError as exc:
            return self._send(409, json.dumps({"error": type(exc).__name__, "detail": str(exc)}).encode())
        except (KeyError, ValueError) as exc:
            return self._send(400, json.dumps({"error": f"bad request: {exc}"}).encode())
        self._send(200, json.dumps(result, sort_keys=True).encode())

    do_GET = do_POST = do_PUT = do_DELETE = do_PATCH = _dispatch


def make_server(gateway: Gateway, address: tuple[str, int], *, admin: bool,
                clock: Clock = wall_clock) -> ThreadingHTTPServer:
    handler = type("BoundHandler", (_Handler,), {"gateway": gateway, "clock": staticmethod(clock), "admin": admin})
    server = ThreadingHTTPServer(address, handler)
    server.daemon_threads = True
    return server


class GatewayServers:
    """Public and admin listeners sharing one gateway."""

    def __init__(self, gateway: Gateway, public: tuple[str, int], admin: tuple[str, int],
                 clock: Clock = wall_clock):
        self.public = make_server(gateway, public, admin=False, clock=clock)
        self.admin = make_server(gateway, admin, admin=True, clock=clock)
        self._threads: list[threading.Thread] = []

    def start(self) -> "GatewayServers":
        for srv in (self.public, self.admin):
            t = threading.Thread(target=srv.serve_forever, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        for srv in (self.public, self.admin):
            srv.shutdown()
            srv.server_close()
        for t in self._threads:
            t.join(timeout=5)
