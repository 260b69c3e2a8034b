"""Memory acquisition emulator producing LiME-format images.

Collects a snapshot from every reachable scenario process over its control
socket, serializes each one as carvable PROC/HIST records, and lays the
records into a synthetic physical address space: page-aligned offsets,
seeded random filler between records, and (for non-empty captures) two
LiME segments separated by an address gap, so decoders must handle the
multi-segment case.

Filler bytes come from a SHA-256 counter stream, giving both the
statistical properties of random data and bit-exact reproducibility from
the seed; any filler block that happens to contain a record magic is
rejected and regenerated, so magics occur only at record starts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import dataclass

from .control import fetch_snapshot
from .lime import MemoryImage, make_segment, write_image
from .records import MAGICS, encode_hist, encode_proc
from .snapshot import ProcessSnapshot
from .wire import parse_hostport

PAGE = 4096
SEGMENT_GAP = 0x40000  # address hole between the two segments


class CaptureError(RuntimeError):
    pass


class FillerStream:
    """Deterministic cryptographically-strong filler, free of record magics."""

    def __init__(self, seed: int):
        self._key = str(seed).encode("ascii")
        self._counter = 0

    def _block(self) -> bytes:
        block = hashlib.sha256(self._key + b":" + str(self._counter).encode("ascii")).digest()
        self._counter += 1
        return block

    def take(self, n: int) -> bytes:
        if n <= 0:
            return b""
        while True:
            out = bytearray()
            while len(out) < n:
                out += self._block()
            blob = bytes(out[:n])
            if not any(m in blob for m in MAGICS):
                return blob
            # astronomically unlikely; skip ahead and redraw


@dataclass(frozen=True)
class PlacedRecord:
    kind: str  # "PROC" or "HIST"
    pid: int
    offset: int  # physical address
    length: int


def _snapshot_records(snap: ProcessSnapshot) -> list[tuple[str, int, bytes]]:
    recs = [("PROC", snap.pid, encode_proc(snap))]
    for epoch, command in snap.history:
        recs.append(("HIST", snap.pid, encode_hist(snap.pid, epoch, command)))
    return recs


def _compose(recs: list[tuple[str, int, bytes]], filler: FillerStream):
    """One segment payload: leading page of filler, records at page-aligned
    offsets, filler padding after each record."""
    out = bytearray(filler.take(PAGE))
    placed = []
    for kind, pid, blob in recs:
        placed.append((len(out), kind, pid, len(blob)))
        out += blob
        pad = (-len(out)) % PAGE
        out += filler.take(pad if pad else PAGE)
    return bytes(out), placed


def build_image(snapshots: list[ProcessSnapshot], seed: int = 0):
    """Lay snapshots into a MemoryImage; returns (image, placed records)."""
    filler = FillerStream(seed)
    recs: list[tuple[str, int, bytes]] = []
    for snap in snapshots:
        recs.extend(_snapshot_records(snap))
    if not recs:
        payload, _ = _compose([], filler)
        return MemoryImage((make_segment(0, payload),)), []

    split = (len(recs) + 1) // 2
    payload_a, placed_a = _compose(recs[:split], filler)
    payload_b, placed_b = _compose(recs[split:], filler)
    start_b = len(payload_a) + SEGMENT_GAP
    start_b += (-start_b) % PAGE
    image = MemoryImage((make_segment(0, payload_a), make_segment(start_b, payload_b)))
    placed = [PlacedRecord(kind, pid, off, ln) for off, kind, pid, ln in placed_a]
    placed += [PlacedRecord(kind, pid, start_b + off, ln) for off, kind, pid, ln in placed_b]
    return image, placed


def capture(process_endpoints, out_path, seed: int = 0) -> MemoryImage:
    """Snapshot every endpoint and write the wrapped image to out_path.

    Unreachable processes are noted in the capture manifest
    (<out_path>.manifest.json) and skipped; the capture itself proceeds.
    """
    endpoints = [parse_hostport(e) if isinstance(e, str) else tuple(e) for e in process_endpoints]
    snapshots = []
    captured = []
    unreachable = []
    for host, port in endpoints:
        try:
            snap = fetch_snapshot((host, port))
        except (OSError, ValueError) as exc:
            unreachable.append({"endpoint": f"{host}:{port}", "error": str(exc)})
            continue
        snapshots.append(snap)
        captured.append({"endpoint": f"{host}:{port}", "pid": snap.pid, "name": snap.name})

    image, placed = build_image(snapshots, seed)
    write_image(image, out_path)
    manifest = {
        "out": str(out_path),
        "seed": seed,
        "captured": captured,
        "unreachable": unreachable,
        "records": [
            {"kind": p.kind, "pid": p.pid, "offset": p.offset, "length": p.length} for p in placed
        ],
        "segments": [{"start": s.start, "end": s.end} for s in image.segments],
    }
    with open(f"{out_path}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return image


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="memcap", description="LiME-format memory capture tool")
    sub = parser.add_subparsers(dest="command", required=True)
    cap = sub.add_parser("capture", help="snapshot processes into a LiME image")
    cap.add_argument("--out", required=True, help="output image path")
    cap.add_argument("--seed", type=int, default=0, help="filler/layout seed")
    cap.add_argument(
        "--endpoints",
        default="",
        help="comma-separated control endpoints (host:port,...); empty for a filler-only image",
    )
    args = parser.parse_args(argv)

    endpoints = [e for e in args.endpoints.split(",") if e]
    image = capture(endpoints, args.out, seed=args.seed)
    total = sum(seg.header.length for seg in image.segments)
    print(f"wrote {args.out}: {len(image.segments)} segment(s), {total} bytes")
    return 0


def script_main() -> None:
    sys.exit(main())
