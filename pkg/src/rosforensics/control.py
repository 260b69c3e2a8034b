"""Per-process control socket: the acquisition channel.

Every scenario process listens on a control port (transport port + 1) and
answers exactly two commands, one request per connection:

    SNAPSHOT               -> one binary frame: PROC record + HIST records
    HIST <epoch> <command> -> text frame "1/ok", or "-1/<reason>"

Requests travel as UTF-8 frames (see wire); the SNAPSHOT response payload
is the same byte layout the capture tool embeds in images, so acquisition
is a straight copy.  Control traffic is plumbing and never appears in any
socket ledger.
"""

from __future__ import annotations

import socket
import threading
import time

from . import wire
from .records import decode_snapshot_blob, encode_snapshot_blob
from .snapshot import ProcessSnapshot, SnapshotError, validate_history_entry


class ControlError(RuntimeError):
    """Control request failed or returned an error frame."""


def handle_control_payload(state, payload: bytes) -> bytes:
    """Map one request payload to one response payload.

    ``state`` provides snapshot() -> ProcessSnapshot and
    record_history(epoch, command).
    """
    try:
        lines = wire.decode_lines(payload)
    except wire.FrameError as exc:
        return wire.encode_lines(["-1", str(exc)])
    command, args = lines[0], lines[1:]
    if command == "SNAPSHOT" and not args:
        return encode_snapshot_blob(state.snapshot())
    if command == "HIST" and len(args) == 2:
        try:
            epoch = int(args[0])
            validate_history_entry(epoch, args[1])
            state.record_history(epoch, args[1])
        except (ValueError, SnapshotError) as exc:
            return wire.encode_lines(["-1", str(exc)])
        return wire.encode_lines(["1", "ok"])
    return wire.encode_lines(["-1", "unknown control command"])


def serve_control_connection(conn: socket.socket, state, timeout: float = 2.0) -> None:
    with conn:
        conn.settimeout(timeout)
        try:
            payload = wire.read_frame(conn)
            wire.write_frame(conn, handle_control_payload(state, payload))
        except (OSError, wire.FrameError):
            pass  # client went away; nothing to clean up


class StaticControlState:
    """Control-state backend for processes whose socket table never changes
    (the master, the launch process): fixed identity, appendable history."""

    def __init__(self, pid: int, name: str, start_time: int, libs=(), sockets=()):
        self._base = ProcessSnapshot(
            pid=pid, name=name, start_time=start_time, libs=tuple(libs), sockets=tuple(sockets)
        )
        self._history: list[tuple[int, str]] = []
        self._lock = threading.Lock()

    def snapshot(self) -> ProcessSnapshot:
        with self._lock:
            return ProcessSnapshot(
                pid=self._base.pid,
                name=self._base.name,
                start_time=self._base.start_time,
                libs=self._base.libs,
                sockets=self._base.sockets,
                history=tuple(self._history),
            )

    def record_history(self, epoch: int, command: str) -> None:
        validate_history_entry(epoch, command)
        with self._lock:
            self._history.append((epoch, command))


class ControlServer:
    """Threaded control endpoint for processes not built around a node loop."""

    def __init__(self, state, host: str, port: int):
        self._state = state
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self._stopping = False
        self._thread = threading.Thread(target=self._loop, daemon=True)

    @property
    def addr(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def start(self) -> "ControlServer":
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stopping:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            serve_control_connection(conn, self._state)

    def stop(self) -> None:
        self._stopping = True
        try:
            self._sock.close()
        except OSError:
            pass


def fetch_snapshot(addr: tuple[str, int], timeout: float = 2.0) -> ProcessSnapshot:
    """Ask a live process for its snapshot over its control socket."""
    with socket.create_connection(addr, timeout=timeout) as sock:
        wire.write_frame(sock, wire.encode_lines(["SNAPSHOT"]))
        blob = wire.read_frame(sock)
    try:
        return decode_snapshot_blob(blob)
    except ValueError as exc:
        raise ControlError(f"bad SNAPSHOT payload from {addr}: {exc}") from None


def send_history(addr: tuple[str, int], epoch: int, command: str, timeout: float = 2.0) -> None:
    with socket.create_connection(addr, timeout=timeout) as sock:
        wire.write_frame(sock, wire.encode_lines(["HIST", str(epoch), command]))
        reply = wire.decode_lines(wire.read_frame(sock))
    if reply[0] != "1":
        raise ControlError(f"HIST rejected by {addr}: {reply[1] if len(reply) > 1 else '?'}")


def wait_control_ready(addr, timeout: float = 10.0, alive=None, what: str = "process"):
    """Poll a control endpoint until it answers SNAPSHOT; returns the snapshot.

    ``alive`` is an optional callable returning False once the polled process
    is known dead, turning a long timeout into an immediate error.
    """
    deadline = time.monotonic() + timeout
    while True:
        if alive is not None and not alive():
            raise ControlError(f"{what} died before answering on {addr}")
        try:
            return fetch_snapshot(addr, timeout=1.0)
        except OSError:
            if time.monotonic() >= deadline:
                raise TimeoutError(f"{what} not ready on {addr} within {timeout}s")
            time.sleep(0.02)
