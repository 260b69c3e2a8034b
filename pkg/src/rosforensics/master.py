"""Network-facing registry master.

Exposes the graph operations over the framed RPC protocol and pushes
publisher-list updates to subscribers whenever a topic's publisher set
changes.  Notification is synchronous and happens before the triggering
request is answered, so an attacker's "success" never races ahead of the
victims' disconnects.

There is no authentication anywhere on this surface: any caller may
register or unregister any node.
"""

from __future__ import annotations

import logging
import multiprocessing
import signal
import socket
import subprocess
import sys
import threading
from dataclasses import dataclass

from . import graph, wire
from .control import ControlServer, StaticControlState, wait_control_ready
from .node import NodeConfig
from .snapshot import SocketRecord, TcpState

log = logging.getLogger(__name__)

DEFAULT_PORT = 11311
NOTIFY_TIMEOUT = 0.5


class StartupError(RuntimeError):
    """The master could not bind its listening socket."""


@dataclass(frozen=True)
class NotifyReport:
    delivered: int = 0
    failed: int = 0
    failures: tuple[tuple[str, str], ...] = ()


def notify_subscribers(
    topic: str,
    publisher_uris: list[str],
    subscribers: list[str],
    timeout: float = NOTIFY_TIMEOUT,
) -> NotifyReport:
    """Send publisherUpdate(topic, uris) to each subscriber endpoint.

    Best-effort: unreachable or unresponsive subscribers are reported,
    never fatal, and never abort delivery to the rest.
    """
    delivered = 0
    failures = []
    for uri in subscribers:
        try:
            resp = wire.call(
                wire.parse_hostport(uri), "publisherUpdate", [topic, *publisher_uris], timeout
            )
            if resp.ok:
                delivered += 1
            else:
                failures.append((uri, f"code {resp.code}: {resp.status}"))
        except (OSError, ValueError, wire.FrameError) as exc:
            failures.append((uri, str(exc)))
    if failures:
        log.warning("publisherUpdate(%s) undelivered to %d subscriber(s)", topic, len(failures))
    return NotifyReport(delivered, len(failures), tuple(failures))


class MasterService:
    """Request handler over a single GraphState; writes are serialized."""

    def __init__(self, notifier=None):
        self._state = graph.GraphState.empty()
        self._lock = threading.Lock()
        self._notifier = notifier or notify_subscribers

    @property
    def state(self) -> graph.GraphState:
        return self._state

    def handle(self, req: wire.RpcRequest) -> wire.RpcResponse:
        with self._lock:
            return self._dispatch(req)

    def _dispatch(self, req: wire.RpcRequest) -> wire.RpcResponse:
        handlers = {
            "registerPublisher": (self._register, 4, "publishers"),
            "registerSubscriber": (self._register, 4, "subscribers"),
            "unregisterPublisher": (self._unregister, 3, "publishers"),
            "unregisterSubscriber": (self._unregister, 3, "subscribers"),
            "getSystemState": (self._system_state, 0, None),
            "lookupNode": (self._lookup_node, 1, None),
        }
        entry = handlers.get(req.method)
        if entry is None:
            return wire.RpcResponse(-1, "method not handled by master")
        handler, arity, role = entry
        if len(req.args) != arity:
            return wire.RpcResponse(-1, f"wrong number of arguments for {req.method}")
        try:
            if role is None:
                return handler(*req.args)
            return handler(role, *req.args)
        except graph.ValidationError as exc:
            return wire.RpcResponse(-1, str(exc))

    def _register(
        self, role: str, caller_name: str, topic: str, type_name: str, caller_api: str
    ) -> wire.RpcResponse:
        caller = graph.node_ref(caller_name, caller_api)
        op = graph.register_publisher if role == "publishers" else graph.register_subscriber
        self._state, peers = op(self._state, caller, topic, type_name)
        if role == "publishers":
            self._notify(topic)
        return wire.RpcResponse(1, f"registered {caller_name} on {topic}", tuple(peers))

    def _unregister(self, role: str, caller_name: str, topic: str, caller_api: str) -> wire.RpcResponse:
        op = graph.unregister_publisher if role == "publishers" else graph.unregister_subscriber
        self._state, count = op(self._state, caller_name, topic, caller_api)
        if role == "publishers" and count:
            self._notify(topic)
        return wire.RpcResponse(1, f"unregistered {caller_name} from {topic}", (str(count),))

    def _notify(self, topic: str) -> None:
        binding = self._state.topics.get(topic)
        pubs = sorted(r.api_uri for r in binding.publishers) if binding else []
        subs = sorted(r.api_uri for r in binding.subscribers) if binding else []
        if subs:
            self._notifier(topic, pubs, subs)

    def _system_state(self) -> wire.RpcResponse:
        pubs, subs = graph.system_state(self._state)
        payload = [" ".join(["P", topic, *names]) for topic, names in pubs]
        payload += [" ".join(["S", topic, *names]) for topic, names in subs]
        return wire.RpcResponse(1, "system state", tuple(payload))

    def _lookup_node(self, name: str) -> wire.RpcResponse:
        ref = graph.lookup_node(self._state, name)
        if ref is None:
            return wire.RpcResponse(0, "unknown node")
        return wire.RpcResponse(1, "node api", (ref.api_uri,))


def decode_system_state(payload) -> tuple[list[tuple[str, list[str]]], list[tuple[str, list[str]]]]:
    """Inverse of the getSystemState payload encoding."""
    pubs, subs = [], []
    for line in payload:
        parts = line.split(" ")
        if len(parts) < 2 or parts[0] not in ("P", "S"):
            raise wire.FrameError(f"bad system-state line: {line!r}")
        (pubs if parts[0] == "P" else subs).append((parts[1], parts[2:]))
    return pubs, subs


class MasterServer:
    """TCP front end: one framed request per connection, handling serialized
    by the service, connection accept concurrent."""

    def __init__(self, service: MasterService, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self.service = service
        try:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._sock.bind((host, port))
            self._sock.listen(64)
        except OSError as exc:
            raise StartupError(f"cannot bind master on {host}:{port}: {exc}") from exc
        self._stopping = False
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)

    @property
    def addr(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    @property
    def uri(self) -> str:
        host, port = self.addr
        return f"{host}:{port}"

    def start(self) -> "MasterServer":
        self._thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            threading.Thread(target=self._serve_one, args=(conn,), daemon=True).start()

    def _serve_one(self, conn: socket.socket) -> None:
        with conn:
            conn.settimeout(5.0)
            try:
                payload = wire.read_frame(conn)
            except (OSError, wire.FrameError):
                return
            try:
                req = wire.decode_request(payload)
                resp = self.service.handle(req)
            except wire.FrameError:
                resp = wire.RpcResponse(-1, "unknown method")
            try:
                wire.write_frame(conn, wire.encode_response(resp))
            except OSError:
                pass

    def stop(self) -> None:
        self._stopping = True
        try:
            self._sock.close()
        except OSError:
            pass


def serve(bind_addr: tuple[str, int], service: MasterService | None = None) -> MasterServer:
    """Start a master on bind_addr; raises StartupError if the port is taken."""
    server = MasterServer(service or MasterService(), bind_addr[0], bind_addr[1])
    return server.start()


@dataclass(frozen=True)
class MasterConfig:
    """Identity and wiring for a master run as its own OS process."""

    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    control_port: int = DEFAULT_PORT + 1
    pid: int = 42
    process_name: str = "rosmaster"
    start_time: int = 0
    libs: tuple[str, ...] = ("libc.so.6", "libros_master.so.1")
    rosout: NodeConfig | None = None  # log subscriber, auto-started with the master


def master_main(cfg: MasterConfig) -> int:
    """Process body for a spawned master: RPC server, control endpoint and,
    per convention, the /rosout subscriber as a child process."""
    try:
        server = serve((cfg.host, cfg.port))
    except StartupError as exc:
        log.error("%s", exc)
        return 4
    ledger = (
        SocketRecord(saddr=cfg.host, sport=cfg.port, daddr="0.0.0.0", dport=0, state=TcpState.LISTEN),
    )
    state = StaticControlState(cfg.pid, cfg.process_name, cfg.start_time, cfg.libs, ledger)
    control = ControlServer(state, cfg.host, cfg.control_port).start()
    rosout = None
    if cfg.rosout is not None:
        rosout = subprocess.Popen(
            [sys.executable, "-m", "rosforensics.node", cfg.rosout.to_json()]
        )

    stop = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    stop.wait()
    if rosout is not None:
        rosout.terminate()
        try:
            rosout.wait(timeout=5.0)
        except subprocess.TimeoutExpired:
            rosout.kill()
    control.stop()
    server.stop()
    return 0


def _master_entry(cfg: MasterConfig) -> None:
    sys.exit(master_main(cfg))


class MasterHandle:
    """Owner's view of a spawned master process."""

    def __init__(self, cfg: MasterConfig, proc):
        self.cfg = cfg
        self.proc = proc

    @property
    def uri(self) -> str:
        return f"{self.cfg.host}:{self.cfg.port}"

    @property
    def control_addr(self) -> tuple[str, int]:
        return (self.cfg.host, self.cfg.control_port)

    @property
    def alive(self) -> bool:
        return self.proc.is_alive()

    def wait_ready(self, timeout: float = 10.0) -> None:
        wait_control_ready(self.control_addr, timeout, alive=self.proc.is_alive, what="master")
        if self.cfg.rosout is not None:
            wait_control_ready(self.cfg.rosout.control_addr, timeout, what="rosout")

    def terminate(self, timeout: float = 5.0) -> None:
        if self.proc.is_alive():
            self.proc.terminate()
            self.proc.join(timeout)
        if self.proc.is_alive():
            self.proc.kill()
            self.proc.join(timeout)


def run_master(cfg: MasterConfig) -> MasterHandle:
    """Spawn a master (and its rosout child, if configured) as an OS process."""
    ctx = multiprocessing.get_context("spawn")
    proc = ctx.Process(target=_master_entry, args=(cfg,), daemon=True, name=cfg.process_name)
    proc.start()
    return MasterHandle(cfg, proc)
