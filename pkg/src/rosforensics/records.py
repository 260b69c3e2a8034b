"""Carvable record codecs for synthetic memory images.

Two record kinds stand in for the kernel structures a real image would
hold, each opening with an 8-byte magic so a signature scan can recover
them from raw bytes:

    PROC  "ROSFPROC" | u32 pid | 16-byte NUL-padded name | u64 start_time
          | u16 lib_count | lib_count * (u16 len + bytes)
          | u16 sock_count | sock_count * {u8 family, u8 proto, u32 saddr,
            u16 sport, u32 daddr, u16 dport, u8 state}
    HIST  "ROSFHIST" | u32 pid | u64 epoch | u16 len | command bytes

All integers are little-endian.  IPv4 addresses travel as their usual
big-endian integer value, packed little-endian like every other field.
"""

from __future__ import annotations

import socket as _socket
import struct
from dataclasses import dataclass

from .snapshot import ProcessSnapshot, SocketRecord, TcpState, validate_history_entry

PROC_MAGIC = b"ROSFPROC"
HIST_MAGIC = b"ROSFHIST"
MAGICS = (PROC_MAGIC, HIST_MAGIC)

_PROC_FIXED = struct.Struct("<8sI16sQ")
_HIST_FIXED = struct.Struct("<8sIQH")
_U16 = struct.Struct("<H")
_SOCK = struct.Struct("<BBIHIHB")


class RecordError(ValueError):
    """A record failed to encode or decode."""


@dataclass(frozen=True)
class HistEntry:
    pid: int
    epoch: int
    command: str


def _ip_to_u32(addr: str) -> int:
    try:
        return int.from_bytes(_socket.inet_aton(addr), "big")
    except OSError:
        raise RecordError(f"bad IPv4 address: {addr!r}") from None


def _u32_to_ip(value: int) -> str:
    return _socket.inet_ntoa(value.to_bytes(4, "big"))


def encode_proc(snap: ProcessSnapshot) -> bytes:
    """Encode a PROC record. History is carried by separate HIST records."""
    name = snap.name.encode("utf-8")
    out = bytearray(_PROC_FIXED.pack(PROC_MAGIC, snap.pid, name.ljust(16, b"\x00"), snap.start_time))
    out += _U16.pack(len(snap.libs))
    for lib in snap.libs:
        raw = lib.encode("utf-8")
        out += _U16.pack(len(raw)) + raw
    out += _U16.pack(len(snap.sockets))
    for rec in snap.sockets:
        out += _SOCK.pack(
            rec.family,
            rec.proto,
            _ip_to_u32(rec.saddr),
            rec.sport,
            _ip_to_u32(rec.daddr),
            rec.dport,
            int(rec.state),
        )
    return bytes(out)


def decode_proc(data: bytes, offset: int = 0) -> tuple[ProcessSnapshot, int]:
    """Decode a PROC record at offset; returns the snapshot and the offset
    one past the record's last byte."""
    try:
        magic, pid, raw_name, start_time = _PROC_FIXED.unpack_from(data, offset)
        if magic != PROC_MAGIC:
            raise RecordError(f"no PROC magic at offset {offset}")
        pos = offset + _PROC_FIXED.size
        (lib_count,) = _U16.unpack_from(data, pos)
        pos += 2
        libs = []
        for _ in range(lib_count):
            (n,) = _U16.unpack_from(data, pos)
            pos += 2
            if pos + n > len(data):
                raise struct.error("library name runs past buffer")
            libs.append(data[pos : pos + n].decode("utf-8"))
            pos += n
        (sock_count,) = _U16.unpack_from(data, pos)
        pos += 2
        sockets = []
        for _ in range(sock_count):
            family, proto, saddr, sport, daddr, dport, state = _SOCK.unpack_from(data, pos)
            pos += _SOCK.size
            sockets.append(
                SocketRecord(
                    saddr=_u32_to_ip(saddr),
                    sport=sport,
                    daddr=_u32_to_ip(daddr),
                    dport=dport,
                    state=TcpState(state),
                    family=family,
                    proto=proto,
                )
            )
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, RecordError):
            raise
        raise RecordError(f"corrupt PROC record at offset {offset}: {exc}") from None
    snap = ProcessSnapshot(
        pid=pid,
        name=raw_name.rstrip(b"\x00").decode("utf-8"),
        start_time=start_time,
        libs=tuple(libs),
        sockets=tuple(sockets),
    )
    return snap, pos


def encode_hist(pid: int, epoch: int, command: str) -> bytes:
    validate_history_entry(epoch, command)
    raw = command.encode("utf-8")
    return _HIST_FIXED.pack(HIST_MAGIC, pid, epoch, len(raw)) + raw


def decode_hist(data: bytes, offset: int = 0) -> tuple[HistEntry, int]:
    try:
        magic, pid, epoch, length = _HIST_FIXED.unpack_from(data, offset)
        if magic != HIST_MAGIC:
            raise RecordError(f"no HIST magic at offset {offset}")
        pos = offset + _HIST_FIXED.size
        if pos + length > len(data):
            raise struct.error("command runs past buffer")
        command = data[pos : pos + length].decode("utf-8")
    except (struct.error, UnicodeDecodeError) as exc:
        raise RecordError(f"corrupt HIST record at offset {offset}: {exc}") from None
    return HistEntry(pid, epoch, command), pos + length


def scan_records(data: bytes, start: int = 0):
    """Yield (offset, record) for every record found at or after ``start``.

    Tolerates arbitrary garbage before and between records: scanning resumes
    at the next magic after each decoded record.  A magic that opens a record
    too corrupt to decode raises RecordError.
    """
    pos = start
    while True:
        hits = [i for i in (data.find(m, pos) for m in MAGICS) if i != -1]
        if not hits:
            return
        at = min(hits)
        if data[at : at + 8] == PROC_MAGIC:
            record, end = decode_proc(data, at)
        else:
            record, end = decode_hist(data, at)
        yield at, record
        pos = end


def encode_snapshot_blob(snap: ProcessSnapshot) -> bytes:
    """Serialize a snapshot as one PROC record plus one HIST record per
    history entry, in recorded order.  This is the control-socket SNAPSHOT
    payload and exactly what the capture tool embeds."""
    out = bytearray(encode_proc(snap))
    for epoch, command in snap.history:
        out += encode_hist(snap.pid, epoch, command)
    return bytes(out)


def decode_snapshot_blob(data: bytes) -> ProcessSnapshot:
    snap, pos = decode_proc(data, 0)
    history = []
    while pos < len(data):
        entry, pos = decode_hist(data, pos)
        if entry.pid != snap.pid:
            raise RecordError(f"history pid {entry.pid} does not match process {snap.pid}")
        history.append((entry.epoch, entry.command))
    return ProcessSnapshot(
        pid=snap.pid,
        name=snap.name,
        start_time=snap.start_time,
        libs=snap.libs,
        sockets=snap.sockets,
        history=tuple(history),
    )
