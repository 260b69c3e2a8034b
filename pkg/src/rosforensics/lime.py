"""Bit-exact LiME memory image container codec.

A LiME file is a sequence of segments, each a 32-byte little-endian header
followed by the raw bytes of one physical address range:

    u32 magic 0x4C694D45 ("EMiL" on disk), u32 version = 1,
    u64 start, u64 end (inclusive), 8 reserved zero bytes

Segments are stored in ascending physical order and never overlap; a
segment's payload length is always end - start + 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

LIME_MAGIC = 0x4C694D45
LIME_MAGIC_BYTES = struct.pack("<I", LIME_MAGIC)  # b"EMiL" on disk
LIME_VERSION = 1
_HEADER = struct.Struct("<IIQQ8s")
HEADER_SIZE = _HEADER.size


class LimeFormatError(ValueError):
    """The byte stream is not a well-formed LiME image."""


@dataclass(frozen=True)
class LimeSegmentHeader:
    start: int
    end: int
    magic: int = LIME_MAGIC
    version: int = LIME_VERSION
    reserved: bytes = b"\x00" * 8

    def __post_init__(self) -> None:
        if self.end < self.start or self.start < 0:
            raise LimeFormatError(f"bad segment range: {self.start:#x}..{self.end:#x}")
        if len(self.reserved) != 8:
            raise LimeFormatError("reserved field must be 8 bytes")

    @property
    def length(self) -> int:
        return self.end - self.start + 1

    def pack(self) -> bytes:
        return _HEADER.pack(self.magic, self.version, self.start, self.end, self.reserved)


@dataclass(frozen=True)
class LimeSegment:
    header: LimeSegmentHeader
    payload: bytes

    def __post_init__(self) -> None:
        if len(self.payload) != self.header.length:
            raise LimeFormatError(
                f"payload length {len(self.payload)} != header length {self.header.length}"
            )

    @property
    def start(self) -> int:
        return self.header.start

    @property
    def end(self) -> int:
        return self.header.end


def make_segment(start: int, payload: bytes) -> LimeSegment:
    if not payload:
        raise LimeFormatError("a segment must cover at least one byte")
    return LimeSegment(LimeSegmentHeader(start, start + len(payload) - 1), payload)


@dataclass(frozen=True)
class MemoryImage:
    """An ordered, non-overlapping set of captured physical ranges."""

    segments: tuple[LimeSegment, ...]

    def __post_init__(self) -> None:
        prev_end = -1
        for seg in self.segments:
            if seg.start <= prev_end:
                raise LimeFormatError(
                    f"segments out of order or overlapping at {seg.start:#x}"
                )
            prev_end = seg.end


def encode_image(image: MemoryImage) -> bytes:
    out = bytearray()
    for seg in image.segments:
        out += seg.header.pack()
        out += seg.payload
    return bytes(out)


def decode_image(data: bytes) -> MemoryImage:
    """Exact inverse of encode_image.

    Raises LimeFormatError("not a LiME image") when the stream does not open
    with a valid header, and names the offending offset for truncated or
    corrupt segments further in.
    """
    if len(data) < HEADER_SIZE or data[:4] != LIME_MAGIC_BYTES:
        raise LimeFormatError("not a LiME image")
    segments = []
    offset = 0
    while offset < len(data):
        if offset + HEADER_SIZE > len(data):
            raise LimeFormatError(f"truncated segment header at offset {offset}")
        magic, version, start, end, reserved = _HEADER.unpack_from(data, offset)
        if magic != LIME_MAGIC:
            raise LimeFormatError(f"bad segment magic at offset {offset}")
        if version != LIME_VERSION:
            raise LimeFormatError(f"unsupported LiME version {version} at offset {offset}")
        header = LimeSegmentHeader(start, end, magic, version, reserved)
        body_at = offset + HEADER_SIZE
        if body_at + header.length > len(data):
            raise LimeFormatError(f"truncated segment payload at offset {body_at}")
        segments.append(LimeSegment(header, data[body_at : body_at + header.length]))
        offset = body_at + header.length
    return MemoryImage(tuple(segments))


def write_image(image: MemoryImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_image(image))


def read_image(path) -> MemoryImage:
    with open(path, "rb") as fh:
        return decode_image(fh.read())
