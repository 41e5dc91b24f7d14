"""Layered security gateway for service-oriented e-commerce backends."""

from .domain import (
    AuditLog, Decision, Layer, RawRequest, Request, ThreatEvent, ThreatKind, Verdict,
    audit_append, canonicalize_request,
)
from .gateway import Gateway, GatewayResponse, PermissionTable

__all__ = [
    "AuditLog", "Decision", "Gateway", "GatewayResponse", "Layer", "PermissionTable", "RawRequest",
    "Request", "ThreatEvent", "ThreatKind", "Verdict", "audit_append", "canonicalize_request",
]
