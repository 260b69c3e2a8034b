"""Plugin-based memory image analyzer.

Carves PROC and HIST records out of a decoded LiME image by signature scan
(byte-granular, no assumptions about how the generator aligned things) and
exposes volatility-style plugins over the result:

    pslist   processes, sorted by pid
    netstat  per-process socket records
    rosnode  middleware nodes, flagged when their socket pattern says the
             node was unregistered behind the process's back
    bash     recovered command history, in timestamp order

The unregistration heuristic is deliberately minimal: a process with some
port in LISTEN state and the same port in CLOSE_WAIT state was likely
unregistered.  It is applied exactly as stated, with no repair attempts;
its known blind spots (multi-topic, multi-node setups) are probed by the
scenario harness instead.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum

from .lime import LimeFormatError, MemoryImage, read_image
from .records import HistEntry, RecordError, scan_records
from .snapshot import ProcessSnapshot, SocketRecord, TcpState

BANNER = "rosvol memory analyzer 0.1.0"


class AnalyzerError(RuntimeError):
    pass


class Verdict(str, Enum):
    REGISTERED = "registered"
    UNREGISTERED = "unregistered"
    NA = "n/a"


@dataclass(frozen=True)
class Finding:
    """One analyzer result row."""

    plugin: str
    subject: str
    verdict: Verdict
    evidence: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.verdict == Verdict.UNREGISTERED and not self.evidence:
            raise AnalyzerError("an unregistered verdict requires evidence")


@dataclass(frozen=True)
class AnalyzerConfig:
    ros_lib_patterns: tuple[str, ...] = ("libros_client",)
    profile: str = ""  # accepted and echoed, never interpreted

    def __post_init__(self) -> None:
        if not self.ros_lib_patterns:
            raise AnalyzerError("ros_lib_patterns must not be empty")


@dataclass(frozen=True)
class CarvedImage:
    processes: tuple[tuple[int, ProcessSnapshot], ...]  # (physical offset, record)
    history: tuple[tuple[int, HistEntry], ...]


def carve(image: MemoryImage) -> CarvedImage:
    """Signature-scan every segment; offsets are physical addresses."""
    procs = []
    hists = []
    for seg in image.segments:
        for offset, record in scan_records(seg.payload):
            entry = (seg.start + offset, record)
            if isinstance(record, HistEntry):
                hists.append(entry)
            else:
                procs.append(entry)
    return CarvedImage(tuple(procs), tuple(hists))


def _processes_by_pid(carved: CarvedImage) -> dict[int, ProcessSnapshot]:
    out: dict[int, ProcessSnapshot] = {}
    for _, snap in carved.processes:
        if snap.pid in out:
            raise AnalyzerError(f"duplicate pid {snap.pid} in image")
        out[snap.pid] = snap
    return out


def plugin_pslist(image: MemoryImage) -> list[tuple[int, str, int]]:
    """(pid, name, start_time) per PROC record, sorted by pid."""
    procs = _processes_by_pid(carve(image))
    return [(pid, procs[pid].name, procs[pid].start_time) for pid in sorted(procs)]


def plugin_netstat(image: MemoryImage, pid: int) -> list[SocketRecord]:
    """Socket records of one process, ordered by (sport, state)."""
    procs = _processes_by_pid(carve(image))
    snap = procs.get(pid)
    if snap is None:
        raise AnalyzerError(f"no process with pid {pid} in image")
    return sorted(snap.sockets, key=SocketRecord.sort_key)


def detect_unregistered(sockets) -> bool:
    """True iff some port has both a LISTEN and a CLOSE_WAIT record."""
    return bool(_suspicious_ports(sockets))


def _suspicious_ports(sockets) -> list[int]:
    listen = {s.sport for s in sockets if s.state == TcpState.LISTEN}
    close_wait = {s.sport for s in sockets if s.state == TcpState.CLOSE_WAIT}
    return sorted(listen & close_wait)


def plugin_rosnode(image: MemoryImage, cfg: AnalyzerConfig | None = None) -> list[Finding]:
    """Middleware node processes (by library fingerprint), each annotated
    with the unregistration verdict for its socket set."""
    cfg = cfg or AnalyzerConfig()
    findings = []
    procs = _processes_by_pid(carve(image))
    for pid in sorted(procs):
        snap = procs[pid]
        if not any(pat in lib for pat in cfg.ros_lib_patterns for lib in snap.libs):
            continue
        ports = _suspicious_ports(snap.sockets)
        if ports:
            finding = Finding(
                plugin="rosnode",
                subject=snap.name,
                verdict=Verdict.UNREGISTERED,
                evidence=tuple(f"port {p} LISTEN+CLOSE_WAIT" for p in ports),
            )
        else:
            finding = Finding(plugin="rosnode", subject=snap.name, verdict=Verdict.REGISTERED)
        findings.append(finding)
    return findings


def plugin_bash(image: MemoryImage) -> list[tuple[int, int, str]]:
    """(pid, epoch, command) per HIST record, by timestamp then image offset."""
    carved = carve(image)
    ordered = sorted(carved.history, key=lambda item: (item[1].epoch, item[0]))
    return [(e.pid, e.epoch, e.command) for _, e in ordered]


def format_timestamp(epoch: int) -> str:
    return datetime.fromtimestamp(epoch, tz=timezone.utc).strftime("%Y-%m-%d %H:%M:%S UTC+0000")


# CLI rendering, one function per plugin


def _render_pslist(image, cfg, pid=None) -> list[str]:
    lines = [f"{'PID':<6} {'NAME':<16} START"]
    for row_pid, name, start in plugin_pslist(image):
        lines.append(f"{row_pid:<6} {name:<16} {format_timestamp(start)}")
    return lines


def _render_netstat(image, cfg, pid=None) -> list[str]:
    procs = _processes_by_pid(carve(image))
    pids = [pid] if pid is not None else sorted(procs)
    lines = []
    for p in pids:
        name = procs[p].name if p in procs else "?"
        for rec in plugin_netstat(image, p):
            lines.append(
                f"{p:<6} {name:<16} TCP {rec.saddr}:{rec.sport} -> "
                f"{rec.daddr}:{rec.dport} {rec.state.name}"
            )
    return lines


def _render_rosnode(image, cfg, pid=None) -> list[str]:
    lines = []
    for finding in plugin_rosnode(image, cfg):
        suffix = " (unregistered)" if finding.verdict == Verdict.UNREGISTERED else ""
        lines.append(f"{finding.subject}{suffix}")
    return lines


def _render_bash(image, cfg, pid=None) -> list[str]:
    procs = {}
    for _, snap in carve(image).processes:
        procs.setdefault(snap.pid, snap.name)
    lines = []
    for row_pid, epoch, command in plugin_bash(image):
        name = procs.get(row_pid, "-")
        lines.append(f"{row_pid:<6} {name:<16} {format_timestamp(epoch)}   {command}")
    return lines


PLUGINS = {
    "pslist": _render_pslist,
    "netstat": _render_netstat,
    "rosnode": _render_rosnode,
    "bash": _render_bash,
}


def run_cli(argv=None, out=None, err=None) -> int:
    out = out or sys.stdout
    err = err or sys.stderr
    parser = argparse.ArgumentParser(prog="rosvol", description="plugin-based memory image analyzer")
    parser.add_argument("-f", "--file", dest="image", required=True, help="memory image path")
    parser.add_argument("--profile", default="", help="profile label (echoed, not interpreted)")
    parser.add_argument("--ros-libs", default="", help="comma-separated node library patterns")
    parser.add_argument("--pid", type=int, default=None, help="restrict netstat to one pid")
    parser.add_argument("plugin", help="one of: " + ", ".join(sorted(PLUGINS)))
    args = parser.parse_args(argv)

    render = PLUGINS.get(args.plugin)
    if render is None:
        print(
            f"unknown plugin {args.plugin!r}; available: " + ", ".join(sorted(PLUGINS)),
            file=err,
        )
        return 1
    try:
        image = read_image(args.image)
    except (OSError, LimeFormatError) as exc:
        print(f"cannot read image {args.image}: {exc}", file=err)
        return 2

    patterns = tuple(p for p in args.ros_libs.split(",") if p)
    cfg = AnalyzerConfig(ros_lib_patterns=patterns or AnalyzerConfig().ros_lib_patterns,
                         profile=args.profile)
    banner = BANNER + (f" (profile {cfg.profile})" if cfg.profile else "")
    try:
        lines = render(image, cfg, pid=args.pid)
    except (AnalyzerError, RecordError) as exc:
        print(f"analysis failed: {exc}", file=err)
        return 2
    print(banner, file=out)
    for line in lines:
        print(line, file=out)
    return 0


def script_main() -> None:
    sys.exit(run_cli())
