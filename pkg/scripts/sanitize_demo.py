#!/usr/bin/env python3
"""Send '#@abc*' through the gateway and show what the trading service receives."""
from sentinel.domain import RawRequest
from sentinel.harness import build_fixture
from sentinel.sanitizer import PAPER_COMPAT, PRODUCTION

for name, policy in (("paper-compat", PAPER_COMPAT), ("production", PRODUCTION)):
    with build_fixture(policy=policy) as fx:
        cert = fx.ims.mint_certificate(fx.user, ["trading"], fx.clock.now, 60_000).encode()
        raw = RawRequest("10.0.0.1:5000", "/svc/trading/search", headers=(("X-IMS-Cert", cert),),
                         query_string="q=%23%40abc%2A")
        resp = fx.gateway.handle(raw, fx.clock.now)
        seen = fx.gateway.received("trading")[-1].query_values("q")
        print(f"{name:<13} status={resp.status} service saw q={seen[0]!r}")
