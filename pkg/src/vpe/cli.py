"""Operator command line.

Service management (`bus/store/launcher/gateway start`) runs the named
service in the foreground; module control, task submission, fault injection
and feedback export talk to already-running services over their public
protocols, so every effect here is reproducible without the CLI.

Exit codes: 0 success, 1 I/O or connectivity failure, 2 validation failure,
3 module-lifecycle conflicts (ALREADY_RUNNING / NOT_RUNNING).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from vpe.errors import VpeError

EXIT_OK = 0
EXIT_IO = 1
EXIT_INVALID = 2
EXIT_LIFECYCLE = 3

_LIFECYCLE_CODES = {"ALREADY_RUNNING", "NOT_RUNNING"}


def _addr(flag: str | None, port_var: str, default_port: int) -> str:
    if flag:
        return flag if ":" in flag else f"127.0.0.1:{flag}"
    return f"127.0.0.1:{os.environ.get(port_var, default_port)}"


def _address_flags(for_subcommand: bool) -> argparse.ArgumentParser:
    """The service-address overrides, accepted both before and after the verb."""
    parent = argparse.ArgumentParser(add_help=False)
    # On subcommands the default is SUPPRESS so an omitted flag does not
    # clobber a value already parsed from the top-level position.
    default = argparse.SUPPRESS if for_subcommand else None
    for name, what in (
        ("gateway", "gateway"),
        ("launcher", "launcher"),
        ("store", "metastore"),
        ("bus", "message bus"),
    ):
        parent.add_argument(
            f"--{name}", metavar="ADDR", default=default, help=f"{what} address (host:port or port)"
        )
    return parent


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    shared = [_address_flags(for_subcommand=True)]
    parser = argparse.ArgumentParser(
        prog="vpe",
        description="Video-parsing platform operator tool.",
        parents=[_address_flags(for_subcommand=False)],
    )
    commands = parser.add_subparsers(dest="command", required=True)

    bus = commands.add_parser("bus", help="message bus service").add_subparsers(dest="verb", required=True)
    bus_start = bus.add_parser("start", parents=shared, help="run the broker in the foreground")
    bus_start.add_argument("--port", type=int, default=None)
    bus_start.add_argument("--data-dir", default=None)
    bus_start.add_argument("--no-fsync", action="store_true", help="trade durability for speed")

    store = commands.add_parser("store", help="metadata store service").add_subparsers(dest="verb", required=True)
    store_start = store.add_parser("start", parents=shared, help="run the store in the foreground")
    store_start.add_argument("--port", type=int, default=None)
    store_start.add_argument("--data-dir", default=None)

    launcher = commands.add_parser("launcher", help="module launch service").add_subparsers(dest="verb", required=True)
    launcher_start = launcher.add_parser("start", parents=shared, help="run the launcher in the foreground")
    launcher_start.add_argument("--port", type=int, default=None)
    launcher_start.add_argument("--registry", required=True, help="module registry JSON file")
    launcher_start.add_argument("--run-dir", required=True, help="directory for module state")

    gateway = commands.add_parser("gateway", help="HTTP gateway service").add_subparsers(dest="verb", required=True)
    gateway_start = gateway.add_parser("start", parents=shared, help="run the gateway in the foreground")
    gateway_start.add_argument("--port", type=int, default=None)
    gateway_start.add_argument("--registry", required=True, help="module registry JSON file")
    gateway_start.add_argument("--stall-after-ms", type=int, default=None)

    module = commands.add_parser("module", help="control module processes").add_subparsers(dest="verb", required=True)
    module_start = module.add_parser("start", parents=shared, help="launch a module")
    module_start.add_argument("module_id")
    module_start.add_argument("--auto-restart", action="store_true", help="relaunch if the process dies")
    module_stop = module.add_parser("stop", parents=shared, help="terminate a module gracefully")
    module_stop.add_argument("module_id")
    module_stop.add_argument("--deadline-ms", type=int, default=5000)
    module.add_parser("list", parents=shared, help="show module status")

    task = commands.add_parser("task", help="submit and inspect tasks").add_subparsers(dest="verb", required=True)
    task_submit = task.add_parser("submit", parents=shared, help="submit a flow graph")
    task_submit.add_argument("--graph", required=True, help="flow graph JSON file")
    task_submit.add_argument("--source", default=None, help="source payloads JSON file")
    task_status = task.add_parser("status", parents=shared, help="show task status")
    task_status.add_argument("task_id")

    fault = commands.add_parser("fault", help="crash injection").add_subparsers(dest="verb", required=True)
    fault_kill = fault.add_parser("kill", parents=shared, help="kill a module now or at a stage boundary")
    fault_kill.add_argument("module_id")
    fault_kill.add_argument(
        "--at",
        choices=["after-poll", "after-execute", "after-publish"],
        default=None,
        help="arm a one-shot crash at this boundary instead of killing immediately",
    )

    feedback = commands.add_parser("feedback", help="exported user feedback").add_subparsers(dest="verb", required=True)
    feedback_export = feedback.add_parser("export", parents=shared, help="write feedback as newline-delimited JSON")
    feedback_export.add_argument("--module", default=None, help="only feedback on this module's results")
    feedback_export.add_argument("--kind", default=None, choices=["SATISFACTION", "SELECTION", "REVISION"])
    feedback_export.add_argument("--since", type=int, default=None, help="milliseconds since epoch")
    feedback_export.add_argument("--out", default=None, help="output file (default: stdout)")

    return parser


# --- service starters -------------------------------------------------------- #


def _cmd_bus_start(args) -> int:
    from vpe.msgbus import DEFAULT_BUS_PORT, serve

    port = args.port or int(os.environ.get("VPE_BUS_PORT", DEFAULT_BUS_PORT))
    data_dir = args.data_dir or os.environ.get("VPE_BUS_DIR", "./vpe-bus")
    serve(data_dir, port=port, fsync=not args.no_fsync)
    return EXIT_OK


def _cmd_store_start(args) -> int:
    from vpe.metastore import DEFAULT_STORE_PORT, serve

    port = args.port or int(os.environ.get("VPE_STORE_PORT", DEFAULT_STORE_PORT))
    data_dir = args.data_dir or os.environ.get("VPE_STORE_DIR", "./vpe-store")
    serve(data_dir, port=port)
    return EXIT_OK


def _cmd_launcher_start(args) -> int:
    from vpe.launcher import DEFAULT_LAUNCHER_PORT, serve
    from vpe.metastore import DEFAULT_STORE_PORT
    from vpe.msgbus import DEFAULT_BUS_PORT

    port = args.port or int(os.environ.get("VPE_LAUNCHER_PORT", DEFAULT_LAUNCHER_PORT))
    serve(
        args.registry,
        bus_addr=_addr(args.bus, "VPE_BUS_PORT", DEFAULT_BUS_PORT),
        store_addr=_addr(args.store, "VPE_STORE_PORT", DEFAULT_STORE_PORT),
        run_dir=args.run_dir,
        port=port,
    )
    return EXIT_OK


def _cmd_gateway_start(args) -> int:
    from vpe.gateway import DEFAULT_GATEWAY_PORT, serve
    from vpe.launcher import DEFAULT_LAUNCHER_PORT
    from vpe.metastore import DEFAULT_STORE_PORT
    from vpe.msgbus import DEFAULT_BUS_PORT
    from vpe.runtime import DEFAULT_TTL_MS

    port = args.port or int(os.environ.get("VPE_GATEWAY_PORT", DEFAULT_GATEWAY_PORT))
    serve(
        args.registry,
        bus_addr=_addr(args.bus, "VPE_BUS_PORT", DEFAULT_BUS_PORT),
        store_addr=_addr(args.store, "VPE_STORE_PORT", DEFAULT_STORE_PORT),
        launcher_addr=_addr(args.launcher, "VPE_LAUNCHER_PORT", DEFAULT_LAUNCHER_PORT),
        port=port,
        stall_after_ms=args.stall_after_ms or DEFAULT_TTL_MS,
    )
    return EXIT_OK


# --- client commands ---------------------------------------------------------- #


def _launcher_client(args):
    from vpe.launcher import DEFAULT_LAUNCHER_PORT, LauncherClient

    return LauncherClient(_addr(args.launcher, "VPE_LAUNCHER_PORT", DEFAULT_LAUNCHER_PORT))


def _cmd_module(args) -> int:
    try:
        with _launcher_client(args) as client:
            if args.verb == "start":
                info = client.launch(args.module_id, auto_restart=args.auto_restart)
                print(f"started {info['module_id']} (pid {info['pid']})")
            elif args.verb == "stop":
                info = client.terminate(args.module_id, deadline_ms=args.deadline_ms)
                print(f"stopped {info['module_id']}" + (" (forced)" if info["forced"] else ""))
            else:
                for row in client.list_modules():
                    state = f"running pid={row['pid']}" if row["running"] else "stopped"
                    print(f"{row['module_id']}\t{state}\trestarts={row['restarts']}")
    except VpeError as e:
        code = EXIT_LIFECYCLE if e.code in _LIFECYCLE_CODES else EXIT_INVALID
        return _fail(f"{e.code}: {e.detail}", code)
    except OSError as e:
        return _fail(f"launcher unreachable: {e}", EXIT_IO)
    return EXIT_OK


def _cmd_fault(args) -> int:
    try:
        with _launcher_client(args) as client:
            info = client.fault(args.module_id, args.at or "now")
        if args.at:
            print(f"armed {info['module_id']} to crash at {info['point']}")
        else:
            print(f"killed {info['module_id']}")
    except VpeError as e:
        code = EXIT_LIFECYCLE if e.code in _LIFECYCLE_CODES else EXIT_INVALID
        return _fail(f"{e.code}: {e.detail}", code)
    except OSError as e:
        return _fail(f"launcher unreachable: {e}", EXIT_IO)
    return EXIT_OK


def _gateway_url(args) -> str:
    from vpe.gateway import DEFAULT_GATEWAY_PORT

    return "http://" + _addr(args.gateway, "VPE_GATEWAY_PORT", DEFAULT_GATEWAY_PORT)


def _cmd_task(args) -> int:
    import requests

    base = _gateway_url(args)
    if args.verb == "submit":
        try:
            body = {"graph": json.loads(open(args.graph, encoding="utf-8").read())}
            if args.source:
                body["source_payloads"] = json.loads(open(args.source, encoding="utf-8").read())
        except OSError as e:
            return _fail(str(e), EXIT_IO)
        except json.JSONDecodeError as e:
            return _fail(f"{args.graph}: not valid JSON: {e}", EXIT_INVALID)
        try:
            response = requests.post(f"{base}/tasks", json=body, timeout=30)
        except requests.RequestException as e:
            return _fail(f"gateway unreachable: {e}", EXIT_IO)
        if response.status_code == 201:
            print(response.json()["task_id"])
            return EXIT_OK
        return _fail(json.dumps(response.json(), indent=2), EXIT_INVALID)
    # status
    try:
        response = requests.get(f"{base}/tasks/{args.task_id}", timeout=30)
    except requests.RequestException as e:
        return _fail(f"gateway unreachable: {e}", EXIT_IO)
    if response.status_code != 200:
        return _fail(json.dumps(response.json()), EXIT_INVALID)
    print(json.dumps(response.json(), indent=2))
    return EXIT_OK


def _cmd_feedback(args) -> int:
    from vpe.metastore import DEFAULT_STORE_PORT, StoreClient

    try:
        with StoreClient(_addr(args.store, "VPE_STORE_PORT", DEFAULT_STORE_PORT)) as store:
            records = store.export_feedback(module_id=args.module, kind=args.kind, since=args.since)
    except (VpeError, OSError) as e:
        return _fail(f"store unreachable: {e}", EXIT_IO)
    lines = "".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records)
    if args.out is None:
        sys.stdout.write(lines)
        return EXIT_OK
    try:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(lines)
    except OSError as e:
        return _fail(str(e), EXIT_IO)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "bus":
            return _cmd_bus_start(args)
        if args.command == "store":
            return _cmd_store_start(args)
        if args.command == "launcher":
            return _cmd_launcher_start(args)
        if args.command == "gateway":
            return _cmd_gateway_start(args)
        if args.command == "module":
            return _cmd_module(args)
        if args.command == "task":
            return _cmd_task(args)
        if args.command == "fault":
            return _cmd_fault(args)
        if args.command == "feedback":
            return _cmd_feedback(args)
    except KeyboardInterrupt:
        return EXIT_OK
    except VpeError as e:
        return _fail(f"{e.code}: {e.detail}", EXIT_IO)
    raise AssertionError(f"unhandled command {args.command}")


if __name__ == "__main__":
    sys.exit(main())
