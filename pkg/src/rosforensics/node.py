"""Publisher and subscriber nodes, each run as its own OS process.

A node keeps a ledger of its topic-transport sockets: the publisher's
listening socket, and one entry per live connection on either side.  The
ledger is the evidence substrate later captures read, so its transitions
follow the kernel's view of TCP:

  * an actively-closed connection leaves the ledger (FIN_WAIT and beyond
    are transient on the closing side);
  * a passively-closed connection is marked CLOSE_WAIT and kept, along
    with its open file descriptor, until the process exits.  Nodes never
    close a connection the peer hung up on.

The second rule is deliberate: a publisher whose subscribers were driven
away keeps both its LISTEN socket and the CLOSE_WAIT remnants on the same
port, which is the exact pathology the analyzer's heuristic keys on.
Accepted sockets are ledgered under the listening port, mirroring real
accept() addressing.

Control and registration traffic never enters the ledger; only topic
transport is evidence.

Port layout per node, from NodeConfig.port_base P:
  P   : publisher topic transport LISTEN / subscriber update endpoint
  P+1 : control socket (SNAPSHOT / HIST)
  P+2…: subscriber outgoing source ports, bound before connect so that
        capture contents do not depend on ephemeral port assignment
"""

from __future__ import annotations

import errno
import json
import logging
import multiprocessing
import selectors
import socket
import struct
import sys
import threading
import time
from dataclasses import asdict, dataclass
from enum import Enum

from . import wire
from .control import ControlServer, fetch_snapshot, wait_control_ready
from .graph import validate_graph_name
from .snapshot import ProcessSnapshot, SocketRecord, TcpState, sort_sockets, validate_history_entry

log = logging.getLogger(__name__)

EXIT_MASTER_UNREACHABLE = 3
EXIT_BIND_FAILURE = 4


class NodeRole(str, Enum):
    PUBLISHER = "publisher"
    SUBSCRIBER = "subscriber"


@dataclass(frozen=True)
class NodeConfig:
    node_name: str
    process_name: str
    role: NodeRole
    topic: str
    master_uri: str
    port_base: int
    pid: int
    start_time: int
    type_name: str = "std_msgs/String"
    host: str = "127.0.0.1"
    libs: tuple[str, ...] = ("libc.so.6", "libros_client.so.1")
    publish_hz: float = 10.0
    master_wait: float = 30.0

    def __post_init__(self) -> None:
        validate_graph_name(self.node_name, "node name")
        validate_graph_name(self.topic, "topic")
        NodeRole(self.role)
        if not 1 <= self.port_base <= 65530:
            raise ValueError(f"port_base out of range: {self.port_base}")

    @property
    def api_uri(self) -> str:
        return f"{self.host}:{self.port_base}"

    @property
    def control_addr(self) -> tuple[str, int]:
        return (self.host, self.port_base + 1)

    def to_json(self) -> str:
        data = asdict(self)
        data["role"] = self.role.value
        data["libs"] = list(self.libs)
        return json.dumps(data)

    @classmethod
    def from_json(cls, text: str) -> "NodeConfig":
        data = json.loads(text)
        data["role"] = NodeRole(data["role"])
        data["libs"] = tuple(data["libs"])
        return cls(**data)


def _listen(host: str, port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen(16)
    return sock


class _ControlAdapter:
    """Bridges the threaded control server onto the runtime's lock."""

    def __init__(self, runtime: "_NodeRuntime"):
        self._runtime = runtime

    def snapshot(self) -> ProcessSnapshot:
        return self._runtime.ledger_snapshot()

    def record_history(self, epoch: int, command: str) -> None:
        self._runtime.record_history(epoch, command)


class _NodeRuntime:
    """Single state-owner for one node: transport I/O, ledger and history.

    The selector loop owns every transition; the control thread only takes
    the lock long enough to copy state out.
    """

    def __init__(self, cfg: NodeConfig):
        self.cfg = cfg
        self._lock = threading.Lock()
        # 4-tuple (saddr, sport, daddr, dport) -> TcpState
        self._ledger: dict[tuple[str, int, str, int], TcpState] = {}
        self._history: list[tuple[int, str]] = []
        self._selector = selectors.DefaultSelector()
        self._listen_sock: socket.socket | None = None
        self._conns: dict[socket.socket, tuple] = {}  # live transport conns -> ledger key
        self._conn_uris: dict[socket.socket, str] = {}  # subscriber side: conn -> publisher uri
        self._pub_conns: dict[str, socket.socket] = {}  # subscriber side: uri -> conn
        self._zombies: list[socket.socket] = []  # CLOSE_WAIT fds, held open on purpose
        self._conn_seq = 0
        self._msg_seq = 0
        self._registered_peers: list[str] = []
        self._stop = False

    # ledger bookkeeping, always under the lock

    def _ledger_set(self, key: tuple, state: TcpState) -> None:
        with self._lock:
            self._ledger[key] = state

    def _ledger_drop(self, key: tuple) -> None:
        with self._lock:
            self._ledger.pop(key, None)

    def ledger_snapshot(self) -> ProcessSnapshot:
        with self._lock:
            sockets = sort_sockets(
                SocketRecord(saddr=k[0], sport=k[1], daddr=k[2], dport=k[3], state=s)
                for k, s in self._ledger.items()
            )
            history = tuple(self._history)
        return ProcessSnapshot(
            pid=self.cfg.pid,
            name=self.cfg.process_name,
            start_time=self.cfg.start_time,
            libs=self.cfg.libs,
            sockets=sockets,
            history=history,
        )

    def record_history(self, epoch: int, command: str) -> None:
        validate_history_entry(epoch, command)
        with self._lock:
            self._history.append((epoch, command))

    # startup

    def _register_with_master(self) -> bool:
        method = (
            "registerPublisher" if self.cfg.role == NodeRole.PUBLISHER else "registerSubscriber"
        )
        args = [self.cfg.node_name, self.cfg.topic, self.cfg.type_name, self.cfg.api_uri]
        master = wire.parse_hostport(self.cfg.master_uri)
        deadline = time.monotonic() + self.cfg.master_wait
        delay = 0.05
        while True:
            try:
                resp = wire.call(master, method, args, timeout=2.0)
                if resp.code == -1:
                    log.error("master rejected registration: %s", resp.status)
                    return False
                self._registered_peers = list(resp.payload)
                return True
            except (OSError, wire.FrameError):
                if time.monotonic() >= deadline:
                    return False
                time.sleep(delay)
                delay = min(delay * 2, 0.5)

    def run(self) -> int:
        try:
            self._listen_sock = _listen(self.cfg.host, self.cfg.port_base)
        except OSError as exc:
            log.error("cannot bind %s:%d: %s", self.cfg.host, self.cfg.port_base, exc)
            return EXIT_BIND_FAILURE
        if self.cfg.role == NodeRole.PUBLISHER:
            self._ledger_set((self.cfg.host, self.cfg.port_base, "0.0.0.0", 0), TcpState.LISTEN)
        if not self._register_with_master():
            return EXIT_MASTER_UNREACHABLE
        if self.cfg.role == NodeRole.SUBSCRIBER:
            for uri in sorted(self._registered_peers):
                self._connect_publisher(uri)
        control = ControlServer(_ControlAdapter(self), self.cfg.host, self.cfg.port_base + 1)
        control.start()
        try:
            self._loop()
        finally:
            control.stop()
        return 0

    # subscriber transport

    def _connect_publisher(self, uri: str) -> None:
        if uri in self._pub_conns:
            return
        try:
            host, port = wire.parse_hostport(uri)
        except ValueError:
            log.warning("ignoring malformed publisher uri %r", uri)
            return
        src_port = self.cfg.port_base + 2 + self._conn_seq
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.cfg.host, src_port))
            sock.settimeout(2.0)
            sock.connect((host, port))
        except OSError as exc:
            log.warning("cannot reach publisher %s: %s", uri, exc)
            sock.close()
            return
        self._conn_seq += 1
        sock.setblocking(False)
        key = (self.cfg.host, src_port, host, port)
        self._ledger_set(key, TcpState.ESTABLISHED)
        self._conns[sock] = key
        self._conn_uris[sock] = uri
        self._pub_conns[uri] = sock
        self._selector.register(sock, selectors.EVENT_READ, self._on_transport_data)

    def _active_close(self, uri: str) -> None:
        sock = self._pub_conns.pop(uri, None)
        if sock is None:
            return
        key = self._conns.pop(sock)
        self._conn_uris.pop(sock, None)
        self._ledger_drop(key)
        self._selector.unregister(sock)
        sock.close()

    def apply_publisher_update(self, topic: str, uris: list[str]) -> None:
        """Reconcile live connections against a new publisher list."""
        if topic != self.cfg.topic:
            return
        target = set(uris)
        for uri in sorted(set(self._pub_conns) - target):
            self._active_close(uri)
        for uri in sorted(target - set(self._pub_conns)):
            self._connect_publisher(uri)

    def _on_update_request(self, lsock: socket.socket) -> None:
        try:
            conn, _ = lsock.accept()
        except OSError:
            return
        with conn:
            conn.settimeout(1.0)
            try:
                req = wire.decode_request(wire.read_frame(conn))
            except (OSError, wire.FrameError):
                return
            if req.method == "publisherUpdate" and len(req.args) >= 1:
                self.apply_publisher_update(req.args[0], list(req.args[1:]))
                resp = wire.RpcResponse(1, "ok")
            else:
                resp = wire.RpcResponse(-1, "method not handled by node")
            try:
                wire.write_frame(conn, wire.encode_response(resp))
            except OSError:
                pass

    # shared transport event handling

    def _passive_close(self, sock: socket.socket) -> None:
        key = self._conns.pop(sock)
        self._ledger_set(key, TcpState.CLOSE_WAIT)
        self._selector.unregister(sock)
        self._zombies.append(sock)  # fd stays open: nobody ever close()s it
        uri = self._conn_uris.pop(sock, None)
        if uri is not None:
            self._pub_conns.pop(uri, None)

    def _conn_reset(self, sock: socket.socket) -> None:
        key = self._conns.pop(sock)
        self._ledger_drop(key)
        try:
            self._selector.unregister(sock)
        except KeyError:
            pass
        uri = self._conn_uris.pop(sock, None)
        if uri is not None:
            self._pub_conns.pop(uri, None)
        sock.close()

    def _on_transport_data(self, sock: socket.socket) -> None:
        try:
            data = sock.recv(65536)
        except (BlockingIOError, InterruptedError):
            return
        except ConnectionResetError:
            self._conn_reset(sock)
            return
        except OSError:
            self._conn_reset(sock)
            return
        if data == b"":
            self._passive_close(sock)
        # payload content is irrelevant; messages are discarded

    # publisher transport

    def _on_accept(self, lsock: socket.socket) -> None:
        try:
            conn, peer = lsock.accept()
        except OSError:
            return
        conn.setblocking(False)
        local = conn.getsockname()
        key = (local[0], local[1], peer[0], peer[1])
        self._ledger_set(key, TcpState.ESTABLISHED)
        self._conns[conn] = key
        self._selector.register(conn, selectors.EVENT_READ, self._on_transport_data)

    def _publish_tick(self) -> None:
        body = f"{self.cfg.topic} {self._msg_seq}".encode("utf-8")
        self._msg_seq += 1
        frame = struct.pack(">I", len(body)) + body
        for sock in list(self._conns):
            if sock in self._conn_uris:
                continue  # subscriber-side conns never carry outbound data
            try:
                sock.send(frame)
            except (BlockingIOError, InterruptedError):
                continue
            except BrokenPipeError:
                self._passive_close(sock)
            except ConnectionResetError:
                self._conn_reset(sock)
            except OSError as exc:
                if exc.errno == errno.EPIPE:
                    self._passive_close(sock)
                else:
                    self._conn_reset(sock)

    # main loop

    def _loop(self) -> None:
        is_pub = self.cfg.role == NodeRole.PUBLISHER
        accept_handler = self._on_accept if is_pub else self._on_update_request
        self._selector.register(self._listen_sock, selectors.EVENT_READ, accept_handler)
        interval = 1.0 / self.cfg.publish_hz if is_pub else None
        next_tick = time.monotonic() + (interval or 0)
        while not self._stop:
            if interval is not None:
                timeout = max(0.0, next_tick - time.monotonic())
            else:
                timeout = 0.2
            for selkey, _ in self._selector.select(timeout):
                selkey.data(selkey.fileobj)
            if interval is not None and time.monotonic() >= next_tick:
                self._publish_tick()
                next_tick += interval


def node_main(cfg: NodeConfig) -> int:
    return _NodeRuntime(cfg).run()


_spawn_ctx = multiprocessing.get_context("spawn")


def _node_entry(cfg: NodeConfig) -> None:
    sys.exit(node_main(cfg))


class NodeHandle:
    """Owner's view of a spawned node process."""

    def __init__(self, cfg: NodeConfig, proc):
        self.cfg = cfg
        self.proc = proc

    @property
    def control_addr(self) -> tuple[str, int]:
        return self.cfg.control_addr

    @property
    def alive(self) -> bool:
        return self.proc.is_alive()

    @property
    def exitcode(self):
        return self.proc.exitcode

    def wait_ready(self, timeout: float = 10.0) -> ProcessSnapshot:
        """Block until the node answers SNAPSHOT (i.e. it has registered)."""
        return wait_control_ready(
            self.control_addr, timeout, alive=self.proc.is_alive, what=self.cfg.node_name
        )

    def snapshot(self) -> ProcessSnapshot:
        return fetch_snapshot(self.control_addr)

    def terminate(self, timeout: float = 5.0) -> None:
        if self.proc.is_alive():
            self.proc.terminate()
            self.proc.join(timeout)
        if self.proc.is_alive():
            self.proc.kill()
            self.proc.join(timeout)


def run_node(cfg: NodeConfig) -> NodeHandle:
    """Spawn a node as its own OS process; returns once the process started
    (use wait_ready to block until it registered)."""
    proc = _spawn_ctx.Process(target=_node_entry, args=(cfg,), daemon=True, name=cfg.process_name)
    proc.start()
    return NodeHandle(cfg, proc)


def main(argv=None) -> int:
    """``python -m rosforensics.node <config-json>``: run one node in this
    process.  Used by the master to launch its rosout child."""
    args = sys.argv[1:] if argv is None else list(argv)
    if len(args) != 1:
        print("usage: python -m rosforensics.node <config-json>", file=sys.stderr)
        return 2
    return node_main(NodeConfig.from_json(args[0]))


if __name__ == "__main__":
    sys.exit(main())
