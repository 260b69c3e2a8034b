"""Process and socket evidence types shared by the node runtime, the capture
tool and the analyzer.

Socket states use the Linux kernel numbering so that captured records read
the same way a kernel socket table would.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum


class TcpState(IntEnum):
    ESTABLISHED = 1
    SYN_SENT = 2
    SYN_RECV = 3
    FIN_WAIT1 = 4
    FIN_WAIT2 = 5
    TIME_WAIT = 6
    CLOSE = 7
    CLOSE_WAIT = 8
    LAST_ACK = 9
    LISTEN = 10
    CLOSING = 11


AF_INET = 2
IPPROTO_TCP = 6

# Matches the kernel comm field: 15 usable bytes plus the NUL terminator.
MAX_PROCESS_NAME = 15


class SnapshotError(ValueError):
    """A snapshot or socket record failed validation."""


def _check_port(port: int, what: str) -> int:
    if not 0 <= int(port) <= 65535:
        raise SnapshotError(f"{what} out of range: {port!r}")
    return int(port)


@dataclass(frozen=True, order=True)
class SocketRecord:
    """One TCP endpoint as a process's ledger sees it."""

    saddr: str
    sport: int
    daddr: str
    dport: int
    state: TcpState
    family: int = AF_INET
    proto: int = IPPROTO_TCP

    def __post_init__(self) -> None:
        _check_port(self.sport, "sport")
        _check_port(self.dport, "dport")
        if self.family != AF_INET or self.proto != IPPROTO_TCP:
            raise SnapshotError("only AF_INET/TCP records are supported")
        if self.state == TcpState.LISTEN and (self.daddr != "0.0.0.0" or self.dport != 0):
            raise SnapshotError("LISTEN records must have daddr=0.0.0.0, dport=0")

    def sort_key(self) -> tuple:
        return (self.sport, int(self.state), self.daddr, self.dport)


def sort_sockets(records) -> tuple[SocketRecord, ...]:
    return tuple(sorted(records, key=SocketRecord.sort_key))


@dataclass(frozen=True)
class ProcessSnapshot:
    """Point-in-time copy of one process: identity, mapped libraries, socket
    ledger and recorded command history."""

    pid: int
    name: str
    start_time: int
    libs: tuple[str, ...] = ()
    sockets: tuple[SocketRecord, ...] = ()
    history: tuple[tuple[int, str], ...] = ()

    def __post_init__(self) -> None:
        if self.pid <= 0:
            raise SnapshotError(f"pid must be positive: {self.pid}")
        if not self.name or len(self.name) > MAX_PROCESS_NAME or "\x00" in self.name:
            raise SnapshotError(f"bad process name: {self.name!r}")
        for lib in self.libs:
            if "\x00" in lib:
                raise SnapshotError(f"NUL in library name: {lib!r}")
        for epoch, command in self.history:
            validate_history_entry(epoch, command)


def validate_history_entry(epoch: int, command: str) -> None:
    if epoch < 0:
        raise SnapshotError(f"negative history timestamp: {epoch}")
    if not command or "\n" in command or "\x00" in command:
        raise SnapshotError(f"bad history command: {command!r}")
    if len(command.encode("utf-8")) > 0xFFFF:
        raise SnapshotError("history command exceeds 65535 bytes")
