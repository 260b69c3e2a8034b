"""Length-prefixed frame protocol used by the master, node endpoints and tools.

Every message on the wire is one frame: a 4-byte big-endian payload length
followed by the payload.  RPC payloads are UTF-8 text, one field per line:

    request  = method, then one line per argument
    response = result code, status line, then one line per payload entry

Codes follow the triple-return convention: 1 success, 0 soft failure,
-1 error.  Arguments and payload entries must not contain newlines, which
keeps encoding and decoding an exact inverse pair.
"""

from __future__ import annotations

import os
import socket
import struct
from dataclasses import dataclass

_LEN = struct.Struct(">I")
MAX_FRAME = 16 * 1024 * 1024

DEFAULT_MASTER_URI = "127.0.0.1:11311"
MASTER_URI_ENV = "ROS_MASTER_URI"

METHODS = frozenset(
    {
        "registerPublisher",
        "unregisterPublisher",
        "registerSubscriber",
        "unregisterSubscriber",
        "getSystemState",
        "lookupNode",
        "publisherUpdate",
    }
)


class FrameError(RuntimeError):
    """Malformed, truncated or oversized frame."""


def _check_line(value: str, what: str) -> str:
    if "\n" in value:
        raise FrameError(f"{what} must not contain newlines: {value!r}")
    return value


@dataclass(frozen=True)
class RpcRequest:
    method: str
    args: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise FrameError(f"unknown method: {self.method!r}")
        for a in self.args:
            _check_line(a, "argument")


@dataclass(frozen=True)
class RpcResponse:
    code: int
    status: str
    payload: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.code not in (-1, 0, 1):
            raise FrameError(f"response code out of range: {self.code!r}")
        _check_line(self.status, "status")
        for p in self.payload:
            _check_line(p, "payload entry")

    @property
    def ok(self) -> bool:
        return self.code == 1


def encode_lines(lines: list[str]) -> bytes:
    return "\n".join(lines).encode("utf-8")


def decode_lines(payload: bytes) -> list[str]:
    try:
        text = payload.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError(f"frame payload is not UTF-8: {exc}") from None
    return text.split("\n")


def encode_request(req: RpcRequest) -> bytes:
    return encode_lines([req.method, *req.args])


def decode_request(payload: bytes) -> RpcRequest:
    lines = decode_lines(payload)
    return RpcRequest(lines[0], tuple(lines[1:]))


def encode_response(resp: RpcResponse) -> bytes:
    return encode_lines([str(resp.code), resp.status, *resp.payload])


def decode_response(payload: bytes) -> RpcResponse:
    lines = decode_lines(payload)
    if len(lines) < 2:
        raise FrameError("response frame shorter than code + status")
    try:
        code = int(lines[0])
    except ValueError:
        raise FrameError(f"bad response code line: {lines[0]!r}") from None
    return RpcResponse(code, lines[1], tuple(lines[2:]))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise FrameError(f"connection closed after {len(buf)} of {n} bytes")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> bytes:
    """Read one length-prefixed frame; raises FrameError on truncation."""
    header = _recv_exact(sock, _LEN.size)
    (length,) = _LEN.unpack(header)
    if length > MAX_FRAME:
        raise FrameError(f"frame of {length} bytes exceeds limit {MAX_FRAME}")
    return _recv_exact(sock, length)


def write_frame(sock: socket.socket, payload: bytes) -> None:
    if len(payload) > MAX_FRAME:
        raise FrameError(f"frame of {len(payload)} bytes exceeds limit {MAX_FRAME}")
    sock.sendall(_LEN.pack(len(payload)) + payload)


def parse_hostport(uri: str) -> tuple[str, int]:
    """Parse ``host:port``, tolerating an ``http://host:port/`` spelling."""
    text = uri.strip()
    if text.startswith(("http://", "https://")):
        text = text.split("://", 1)[1]
    text = text.rstrip("/")
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"malformed endpoint uri: {uri!r}")
    return host, int(port)


def master_endpoint(explicit: str | None = None) -> tuple[str, int]:
    """Resolve the master address: flag value, then $ROS_MASTER_URI, then default."""
    uri = explicit or os.environ.get(MASTER_URI_ENV) or DEFAULT_MASTER_URI
    return parse_hostport(uri)


def call(
    addr: tuple[str, int],
    method: str,
    args: list[str] | tuple[str, ...] = (),
    timeout: float = 2.0,
) -> RpcResponse:
    """One-shot RPC: connect, send one request frame, read one response frame."""
    req = RpcRequest(method, tuple(args))
    with socket.create_connection(addr, timeout=timeout) as sock:
        write_frame(sock, encode_request(req))
        return decode_response(read_frame(sock))
