"""Operator entry point: ``sentinel <subcommand>``.

Exit codes: 0 success, 1 invalid input or operational failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
import urllib.error
import urllib.request
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

from .actions import ActionRegistry, RegistryParseError, load_registry
from .config import ConfigError, build_gateway, load_config, resolve_config_path
from .gateway import default_permissions
from .harness import ALL_KINDS, ScenarioKind, build_fixture, check_expectations, run_evaluation, scenarios_for
from .ims import write_key_file
from .rules import ParseError, parse_rules
from .services import MOCKS

OPERATOR_SECRET_ENV = "SENTINEL_OPERATOR_SECRET"
USER_SECRET_ENV = "SENTINEL_USER_SECRET"


def _config_arg() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="config file (default: $SENTINEL_CONFIG)")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _config_arg()
    parser = argparse.ArgumentParser(prog="sentinel", parents=[common],
                                     description="Layered security gateway for service-oriented shop backends.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("serve", parents=[common], help="run the public and admin listeners")

    p = sub.add_parser("check-rules", parents=[common], help="parse a rule file")
    p.add_argument("file", nargs="?")
    p = sub.add_parser("check-registry", parents=[common], help="parse an action registry file")
    p.add_argument("file", nargs="?")

    user = sub.add_parser("user", parents=[common], help="manage principals")
    usub = user.add_subparsers(dest="user_command", required=True)
    p = usub.add_parser("add", parents=[common])
    p.add_argument("id")
    p.add_argument("--kind", choices=("user", "service"), default="user")
    p.add_argument("--admin", action="store_true")
    p.add_argument("--operator")
    p = usub.add_parser("disable", parents=[common])
    p.add_argument("id")
    p.add_argument("--operator", required=True)

    p = sub.add_parser("grant-link", parents=[common], help="approve a service-to-service link")
    p.add_argument("caller")
    p.add_argument("callee")
    p.add_argument("--operator", required=True)

    p = sub.add_parser("permit", parents=[common], help="edit function permissions")
    p.add_argument("function")
    p.add_argument("cls", metavar="class")
    p.add_argument("--revoke", action="store_true")
    p.add_argument("--operator", required=True)

    p = sub.add_parser("reset-breaker", parents=[common], help="reconnect the data tier")
    p.add_argument("--operator", required=True)

    p = sub.add_parser("eval", parents=[common], help="run the attack evaluation")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--scenario", action="append", choices=[k.value for k in ALL_KINDS])
    p.add_argument("--assert", dest="check", action="store_true")

    p = sub.add_parser("init", help="write a starter configuration directory")
    p.add_argument("directory")
    return parser


# ---------------------------------------------------------------------------

def _config_path(args) -> Optional[Path]:
    return resolve_config_path(getattr(args, "config", None))


def _file_from_config(args, explicit: Optional[str], key: str) -> Path:
    if explicit:
        return Path(explicit)
    cfg_path = _config_path(args)
    if cfg_path is None:
        raise ConfigError([f"give a file or a --config that sets {key}"])
    path = load_config(cfg_path).path(key)
    if path is None:
        raise ConfigError([f"{cfg_path} does not set {key}"])
    return path


def cmd_check_rules(args) -> int:
    path = _file_from_config(args, args.file, "rules.file")
    try:
        ruleset = parse_rules(path.read_text(), path.name)
    except OSError as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return 1
    except ParseError as exc:
        print(f"{path}:{exc.line}:{exc.column}: {exc.message} (got {exc.token!r}; expected {exc.expected})",
              file=sys.stderr)
        return 1
    print(f"{len(ruleset)} rules (version {ruleset.version})")
    return 0


def cmd_check_registry(args) -> int:
    path = _file_from_config(args, args.file, "actions.file")
    try:
        reg = load_registry(path.read_text())
    except OSError as exc:
        print(f"{path}: {exc}", file=sys.stderr)
        return 1
    except RegistryParseError as exc:
        print(f"{path}:{exc}", file=sys.stderr)
        return 1
    print(f"{len(reg)} actions (version {reg.version})")
    return 0


def cmd_serve(args) -> int:
    cfg_path = _config_path(args)
    if cfg_path is None:
        print("serve needs --config or $SENTINEL_CONFIG", file=sys.stderr)
        return 2
    from .server import GatewayServers

    cfg = load_config(cfg_path)
    notify_path = cfg.path("ids.notify")
    notify = open(notify_path, "a", encoding="utf-8") if notify_path else None
    try:
        gateway = build_gateway(cfg, notify=notify)
        servers = GatewayServers(gateway, cfg.public_address, cfg.admin_address)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config: {problem}", file=sys.stderr)
        print("refusing to serve", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"cannot bind: {exc}", file=sys.stderr)
        return 1
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    servers.start()
    print(f"public {cfg.public_address[0]}:{servers.public.server_address[1]}  "
          f"admin {cfg.admin_address[0]}:{servers.admin.server_address[1]}", flush=True)
    stop.wait()
    servers.stop()
    if notify:
        notify.close()
    return 0


def _admin_call(args, command: str, params: dict) -> int:
    cfg_path = _config_path(args)
    if cfg_path is None:
        print(f"{args.command} needs --config or $SENTINEL_CONFIG", file=sys.stderr)
        return 2
    host, port = load_config(cfg_path).admin_address
    operator = getattr(args, "operator", None)
    if operator:
        params = dict(params, operator=operator, operator_secret=os.environ.get(OPERATOR_SECRET_ENV, ""))
    req = urllib.request.Request(f"http://{host}:{port}/admin/{command}", data=json.dumps(params).encode(),
                                 headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            print(resp.read().decode())
            return 0
    except urllib.error.HTTPError as exc:
        print(f"{command} refused ({exc.code}): {exc.read().decode()}", file=sys.stderr)
        return 1
    except (urllib.error.URLError, OSError) as exc:
        print(f"admin endpoint unreachable: {exc}", file=sys.stderr)
        return 1


def cmd_user(args) -> int:
    if args.user_command == "add":
        secret = os.environ.get(USER_SECRET_ENV)
        if not secret:
            print(f"set {USER_SECRET_ENV} to the new principal's secret", file=sys.stderr)
            return 1
        params = {"id": args.id, "secret": secret, "kind": args.kind.capitalize(),
                  "groups": ["admin"] if args.admin else []}
        return _admin_call(args, "user-add", params)
    return _admin_call(args, "user-disable", {"id": args.id})


def cmd_eval(args) -> int:
    kinds = [ScenarioKind(s) for s in args.scenario] if args.scenario else list(ALL_KINDS)
    with build_fixture(args.seed) as fx:
        report = run_evaluation(fx, scenarios_for(kinds, args.seed), n=args.n)
        failures = check_expectations(report, fx)
    sys.stdout.write(report.table())
    sys.stdout.write("\n")
    sys.stdout.write(report.records())
    if args.check and failures:
        for f in failures:
            print(f"FAIL {f}", file=sys.stderr)
        return 1
    return 0


CONFIG_TEMPLATE = """\
# sentinel gateway configuration
listen.public=127.0.0.1:8080
listen.admin=127.0.0.1:8081
rules.file=rules.wsr
actions.file=actions.txt
permissions.file=permissions.txt
ims.key_file=ims.key
ims.principals_file=principals.json
vault.key_file=vault.key
vault.store=tier2.store
audit.file=audit.log
ids.notify=trips.log
dos.max_requests=100
dos.window_ms=10000
dos.ban_ms=60000
ids.threshold=5
ids.window_ms=10000
ids.cooldown_ms=30000
"""


def cmd_init(args) -> int:
    root = Path(args.directory)
    root.mkdir(parents=True, exist_ok=True)
    if (root / "sentinel.conf").exists():
        print(f"{root / 'sentinel.conf'} already exists", file=sys.stderr)
        return 1
    services = "".join(f"services.{name}.actions={','.join(actions)}\n" for name, (_, actions) in MOCKS.items())
    (root / "sentinel.conf").write_text(CONFIG_TEMPLATE + services)
    (root / "rules.wsr").write_text(resources.files("sentinel.data").joinpath("starter.wsr").read_text())
    registry = ActionRegistry.of((name, a) for name, (_, actions) in MOCKS.items() for a in actions)
    (root / "actions.txt").write_text("".join(f"{s} {a}\n" for s, a in sorted(registry.entries)))
    (root / "permissions.txt").write_text(default_permissions(registry).dumps())
    write_key_file(root / "ims.key")
    write_key_file(root / "vault.key")
    print(f"wrote {root / 'sentinel.conf'}")
    return 0


COMMANDS = {
    "serve": cmd_serve,
    "check-rules": cmd_check_rules,
    "check-registry": cmd_check_registry,
    "user": cmd_user,
    "grant-link": lambda a: _admin_call(a, "grant-link", {"caller": a.caller, "callee": a.callee}),
    "permit": lambda a: _admin_call(a, "permit", {"function": a.function, "class": a.cls, "allowed": not a.revoke}),
    "reset-breaker": lambda a: _admin_call(a, "reset-breaker", {}),
    "eval": cmd_eval,
    "init": cmd_init,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("SENTINEL_LOG", "WARNING"))
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config: {problem}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
