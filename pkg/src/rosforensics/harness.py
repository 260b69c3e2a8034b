"""One-command reproduction scenarios: launch the middleware, capture memory,
attack, capture again, analyze, and diff everything against golden
transcripts.

Timestamps come from a virtual clock pinned to a fixed start instant, and
every port is derived from the scenario seed, so a scenario re-run with the
same seed produces byte-identical images and transcripts.  Process
identities (pids, names, start times) are scripted, not taken from the OS:
they are scenario data, while the sockets and process lifetimes underneath
are real.

Scenarios:

    baseline              no attack; both captures must analyze clean
    unregistration_attack the full study case with golden-checked output
    two_publishers        attack with a second publisher on the topic; the
                          heuristic's verdicts are recorded, not asserted,
                          and the run is only checked for determinism
"""

from __future__ import annotations

import argparse
import calendar
import difflib
import hashlib
import io
import json
import os
import random
import sys
import time
import traceback
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import analyzer, attack, wire
from .capture import capture
from .control import ControlServer, StaticControlState, send_history, wait_control_ready
from .master import MasterConfig, run_master
from .node import NodeConfig, NodeRole, run_node
from .snapshot import TcpState

STAGE_TIMEOUT = 10.0

# Virtual clock origin: the first command in the recovered history.
BASE_EPOCH = calendar.timegm((2018, 11, 1, 17, 58, 12, 0, 0, 0))

_INSMOD = 'sudo insmod /lib/modules/lime.ko "path={img} format=lime"'
_RMMOD = "sudo rmmod /lib/modules/lime.ko"
ATTACK_HISTORY_CMD = "roschaos master unregister node --node_name /publisher"

CAPTURE_PRE_AT = 681
RMMOD_AT = 686
ATTACK_AT = 694
CAPTURE_POST_AT = 698

START_OFFSETS = {
    "launch": -4,
    "rosmaster": 6,
    "rosout": 7,
    "talker": 16,
    "listener": 20,
    "talker2": 23,
}
PIDS = {"launch": 1, "rosmaster": 42, "rosout": 55, "talker": 90, "talker2": 95, "listener": 108}

GOLDEN_FILES = (
    "transcript.txt",
    "rosnode_pre.txt",
    "rosnode_post.txt",
    "pslist_post.txt",
    "bash_post.txt",
)
DETERMINISM_FILES = GOLDEN_FILES + ("netstat_post.txt",)


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    attack: bool
    two_publishers: bool
    img_post: str
    img_pre: str = "robot.lime"
    golden_checked: bool = True


SCENARIOS = {
    "baseline": ScenarioSpec("baseline", attack=False, two_publishers=False, img_post="robot_post.lime"),
    "unregistration_attack": ScenarioSpec(
        "unregistration_attack", attack=True, two_publishers=False, img_post="robot_hacked.lime"
    ),
    "two_publishers": ScenarioSpec(
        "two_publishers",
        attack=True,
        two_publishers=True,
        img_post="robot_hacked.lime",
        golden_checked=False,
    ),
}


@dataclass
class StageResult:
    stage: str
    ok: bool
    seconds: float
    error: str | None = None


@dataclass
class GoldenCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class ScenarioReport:
    scenario: str
    seed: int
    workdir: str
    stages: list[StageResult] = field(default_factory=list)
    checks: list[GoldenCheck] = field(default_factory=list)
    verdicts: dict = field(default_factory=dict)
    victim_alive: bool | None = None

    @property
    def stages_ok(self) -> bool:
        return all(s.ok for s in self.stages)

    @property
    def ok(self) -> bool:
        return self.stages_ok and all(c.passed for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "seed": self.seed,
            "workdir": self.workdir,
            "ok": self.ok,
            "victim_alive": self.victim_alive,
            "stages": [vars(s) for s in self.stages],
            "checks": [vars(c) for c in self.checks],
            "verdicts": self.verdicts,
        }


def default_golden_dir(scenario: str) -> Path:
    return Path(str(resources.files("rosforensics") / "golden" / scenario))


def _port_block(seed: int) -> int:
    # Keep assigned ports below the kernel's ephemeral range.
    return 20000 + random.Random(f"ports:{seed}").randrange(200) * 50


def inject_history(control_addr, events) -> None:
    """Feed (epoch, command) pairs into a process's recorded history."""
    for epoch, command in events:
        send_history(control_addr, epoch, command)


class _ScenarioRun:
    def __init__(self, spec: ScenarioSpec, workdir: Path, seed: int):
        self.spec = spec
        self.workdir = Path(workdir)
        self.seed = seed
        self.host = "127.0.0.1"
        block = _port_block(seed)
        self.master_port = block
        self.launch_control = (self.host, block + 46)
        t = lambda key: BASE_EPOCH + START_OFFSETS[key]
        master_uri = f"{self.host}:{self.master_port}"
        self.rosout_cfg = NodeConfig(
            node_name="/rosout",
            process_name="rosout",
            role=NodeRole.SUBSCRIBER,
            topic="/rosout",
            type_name="rosgraph_msgs/Log",
            master_uri=master_uri,
            port_base=block + 10,
            pid=PIDS["rosout"],
            start_time=t("rosout"),
        )
        self.master_cfg = MasterConfig(
            host=self.host,
            port=self.master_port,
            control_port=block + 1,
            pid=PIDS["rosmaster"],
            start_time=t("rosmaster"),
            rosout=self.rosout_cfg,
        )
        self.talker_cfg = NodeConfig(
            node_name="/publisher",
            process_name="talker",
            role=NodeRole.PUBLISHER,
            topic="/chatter",
            master_uri=master_uri,
            port_base=block + 20,
            pid=PIDS["talker"],
            start_time=t("talker"),
        )
        self.listener_cfg = NodeConfig(
            node_name="/listener",
            process_name="listener",
            role=NodeRole.SUBSCRIBER,
            topic="/chatter",
            master_uri=master_uri,
            port_base=block + 30,
            pid=PIDS["listener"],
            start_time=t("listener"),
        )
        self.talker2_cfg = NodeConfig(
            node_name="/publisher2",
            process_name="talker2",
            role=NodeRole.PUBLISHER,
            topic="/chatter",
            master_uri=master_uri,
            port_base=block + 40,
            pid=PIDS["talker2"],
            start_time=t("talker2"),
        )
        self._launch_server: ControlServer | None = None
        self._master = None
        self._nodes = []
        self._talker = None
        self._listener = None
        self._transcript: list[str] = []
        self._saved_master_env = None
        self.victim_alive: bool | None = None
        self.verdicts: dict = {}

    # helpers

    @property
    def endpoints(self) -> list[tuple[str, int]]:
        eps = [
            self.launch_control,
            (self.host, self.master_cfg.control_port),
            self.rosout_cfg.control_addr,
            self.talker_cfg.control_addr,
        ]
        if self.spec.two_publishers:
            eps.append(self.talker2_cfg.control_addr)
        eps.append(self.listener_cfg.control_addr)
        return eps

    def inject_history(self, events) -> None:
        inject_history(self.launch_control, events)

    def _poll(self, predicate, what: str, timeout: float = STAGE_TIMEOUT) -> None:
        deadline = time.monotonic() + timeout
        while not predicate():
            if time.monotonic() >= deadline:
                raise TimeoutError(f"timed out waiting for {what}")
            time.sleep(0.02)

    def _attack_cli(self, *args: str) -> str:
        self._transcript.append("$ attack " + " ".join(args))
        buf = io.StringIO()
        code = attack.run_cli(list(args), out=buf, err=buf)
        if code != 0:
            raise RuntimeError(f"attack CLI exited {code}: {buf.getvalue()!r}")
        text = buf.getvalue()
        if text:
            self._transcript.extend(text.rstrip("\n").split("\n"))
        return text

    def _rosvol(self, image_name: str, plugin: str) -> str:
        buf = io.StringIO()
        err = io.StringIO()
        code = analyzer.run_cli(["-f", str(self.workdir / image_name), plugin], out=buf, err=err)
        if code != 0:
            raise RuntimeError(f"rosvol {plugin} exited {code}: {err.getvalue()!r}")
        return buf.getvalue()

    @staticmethod
    def _parse_rosnode(text: str) -> dict[str, str]:
        verdicts = {}
        for line in text.splitlines()[1:]:  # skip banner
            if line.endswith(" (unregistered)"):
                verdicts[line[: -len(" (unregistered)")]] = "unregistered"
            elif line:
                verdicts[line] = "registered"
        return verdicts

    def _established_to(self, snapshot, dport: int) -> bool:
        return any(
            s.state == TcpState.ESTABLISHED and s.dport == dport for s in snapshot.sockets
        )

    # stages

    def _stage_launch_control(self) -> None:
        self.workdir.mkdir(parents=True, exist_ok=True)
        state = StaticControlState(
            PIDS["launch"],
            "launch",
            BASE_EPOCH + START_OFFSETS["launch"],
            libs=("libc.so.6",),
        )
        self._launch_server = ControlServer(state, *self.launch_control).start()

    def _stage_master(self) -> None:
        self._master = run_master(self.master_cfg)
        self._master.wait_ready()
        self._saved_master_env = os.environ.get(wire.MASTER_URI_ENV)
        os.environ[wire.MASTER_URI_ENV] = f"{self.host}:{self.master_port}"

    def _stage_nodes(self) -> None:
        self._talker = run_node(self.talker_cfg)
        self._nodes.append(self._talker)
        self._talker.wait_ready()
        self._listener = run_node(self.listener_cfg)
        self._nodes.append(self._listener)
        self._listener.wait_ready()
        self._poll(
            lambda: self._established_to(self._listener.snapshot(), self.talker_cfg.port_base)
            and any(
                s.state == TcpState.ESTABLISHED for s in self._talker.snapshot().sockets
            ),
            "talker/listener transport",
        )
        if self.spec.two_publishers:
            talker2 = run_node(self.talker2_cfg)
            self._nodes.append(talker2)
            talker2.wait_ready()
            self._poll(
                lambda: self._established_to(
                    self._listener.snapshot(), self.talker2_cfg.port_base
                ),
                "second publisher transport",
            )

    def _boot_history(self) -> list[tuple[int, str]]:
        events = [
            (BASE_EPOCH, "rosnode list"),
            (BASE_EPOCH + 6, "roscore &"),
            (BASE_EPOCH + 16, "rosrun scenario1 talker &"),
            (BASE_EPOCH + 20, "rosrun scenario1 listener > /tmp/listener.txt &"),
        ]
        if self.spec.two_publishers:
            events.append((BASE_EPOCH + 23, "rosrun scenario1 talker2 &"))
        events.append((BASE_EPOCH + 667, "rosnode list"))
        return events

    def _stage_history_boot(self) -> None:
        self.inject_history(self._boot_history())

    def _stage_node_list_pre(self) -> None:
        self._attack_cli("node-list")

    def _stage_capture_pre(self) -> None:
        self.inject_history([(BASE_EPOCH + CAPTURE_PRE_AT, _INSMOD.format(img=self.spec.img_pre))])
        capture(self.endpoints, self.workdir / self.spec.img_pre, seed=self.seed)
        self.inject_history([(BASE_EPOCH + RMMOD_AT, _RMMOD)])

    def _stage_attack(self) -> None:
        self._attack_cli("master", "unregister", "node", "--node_name", "/publisher")
        self.inject_history([(BASE_EPOCH + ATTACK_AT, ATTACK_HISTORY_CMD)])
        base = self.talker_cfg.port_base
        self._poll(
            lambda: any(
                s.state == TcpState.CLOSE_WAIT and s.sport == base
                for s in self._talker.snapshot().sockets
            ),
            "talker CLOSE_WAIT",
        )
        self._poll(
            lambda: not self._established_to(self._listener.snapshot(), base),
            "listener disconnect",
        )
        self.victim_alive = self._talker.alive

    def _stage_node_list_post(self) -> None:
        self._attack_cli("node-list")

    def _stage_capture_post(self) -> None:
        self.inject_history(
            [(BASE_EPOCH + CAPTURE_POST_AT, _INSMOD.format(img=self.spec.img_post))]
        )
        capture(self.endpoints, self.workdir / self.spec.img_post, seed=self.seed + 1)

    def _stage_analyze(self) -> None:
        (self.workdir / "transcript.txt").write_text("\n".join(self._transcript) + "\n")
        outputs = {
            "rosnode_pre.txt": self._rosvol(self.spec.img_pre, "rosnode"),
            "rosnode_post.txt": self._rosvol(self.spec.img_post, "rosnode"),
            "pslist_post.txt": self._rosvol(self.spec.img_post, "pslist"),
            "bash_post.txt": self._rosvol(self.spec.img_post, "bash"),
            "netstat_post.txt": self._rosvol(self.spec.img_post, "netstat"),
        }
        for name, text in outputs.items():
            (self.workdir / name).write_text(text)
        self.verdicts = {
            "pre": self._parse_rosnode(outputs["rosnode_pre.txt"]),
            "post": self._parse_rosnode(outputs["rosnode_post.txt"]),
        }

    def stages(self):
        yield "launch-control", self._stage_launch_control
        yield "master", self._stage_master
        yield "nodes", self._stage_nodes
        yield "history-boot", self._stage_history_boot
        yield "node-list-pre", self._stage_node_list_pre
        yield "capture-pre", self._stage_capture_pre
        if self.spec.attack:
            yield "attack", self._stage_attack
        yield "node-list-post", self._stage_node_list_post
        yield "capture-post", self._stage_capture_post
        yield "analyze", self._stage_analyze

    def teardown(self) -> None:
        for node in self._nodes:
            try:
                node.terminate()
            except Exception:
                pass
        if self._master is not None:
            try:
                self._master.terminate()
            except Exception:
                pass
        if self._launch_server is not None:
            self._launch_server.stop()
        if self._saved_master_env is None:
            os.environ.pop(wire.MASTER_URI_ENV, None)
        else:
            os.environ[wire.MASTER_URI_ENV] = self._saved_master_env

    def execute(self) -> list[StageResult]:
        results = []
        try:
            for name, fn in self.stages():
                t0 = time.monotonic()
                try:
                    fn()
                except Exception as exc:
                    results.append(
                        StageResult(
                            name,
                            False,
                            time.monotonic() - t0,
                            f"{exc}\n{traceback.format_exc(limit=3)}",
                        )
                    )
                    break
                results.append(StageResult(name, True, time.monotonic() - t0))
        finally:
            self.teardown()
        return results


def _short_diff(expected: bytes, produced: bytes) -> str:
    try:
        exp = expected.decode("utf-8").splitlines()
        got = produced.decode("utf-8").splitlines()
    except UnicodeDecodeError:
        return "binary content differs"
    delta = list(difflib.unified_diff(exp, got, "golden", "produced", lineterm="", n=1))
    return "\n".join(delta[:12])


def _golden_checks(run: _ScenarioRun, golden_dir: Path, update: bool) -> list[GoldenCheck]:
    checks = []
    for fname in GOLDEN_FILES:
        produced = (run.workdir / fname).read_bytes()
        gpath = golden_dir / fname
        if update:
            gpath.parent.mkdir(parents=True, exist_ok=True)
            gpath.write_bytes(produced)
        if not gpath.exists():
            checks.append(GoldenCheck(fname, False, "golden file missing"))
            continue
        expected = gpath.read_bytes()
        if produced == expected:
            checks.append(GoldenCheck(fname, True))
        else:
            checks.append(GoldenCheck(fname, False, _short_diff(expected, produced)))
    return checks


def _file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _determinism_check(spec: ScenarioSpec, first: _ScenarioRun, seed: int) -> GoldenCheck:
    rerun = _ScenarioRun(spec, first.workdir / "rerun", seed)
    results = rerun.execute()
    if not all(r.ok for r in results):
        failed = next(r for r in results if not r.ok)
        return GoldenCheck("determinism", False, f"rerun failed at {failed.stage}: {failed.error}")
    names = DETERMINISM_FILES + (spec.img_pre, spec.img_post)
    for name in names:
        if _file_hash(first.workdir / name) != _file_hash(rerun.workdir / name):
            return GoldenCheck("determinism", False, f"{name} differs between identical runs")
    return GoldenCheck("determinism", True)


def run_scenario(
    name: str,
    workdir,
    seed: int = 0,
    golden_dir=None,
    update_golden: bool = False,
) -> ScenarioReport:
    """Run one scenario end to end; emits images, transcripts, analyzer
    output and a pass/fail check table into workdir."""
    spec = SCENARIOS.get(name)
    if spec is None:
        raise ValueError(f"unknown scenario {name!r}; available: {', '.join(sorted(SCENARIOS))}")
    workdir = Path(workdir)
    run = _ScenarioRun(spec, workdir, seed)
    report = ScenarioReport(scenario=name, seed=seed, workdir=str(workdir))
    report.stages = run.execute()
    report.victim_alive = run.victim_alive
    report.verdicts = run.verdicts
    if report.stages_ok:
        if spec.golden_checked:
            gdir = Path(golden_dir) if golden_dir else default_golden_dir(name)
            report.checks = _golden_checks(run, gdir, update_golden)
        else:
            report.checks = [_determinism_check(spec, run, seed)]
    with open(workdir / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return report


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="rosforensics-demo", description="scenario harness")
    sub = parser.add_subparsers(dest="command", required=True)
    runp = sub.add_parser("run", help="run one scenario end to end")
    runp.add_argument("scenario", choices=sorted(SCENARIOS))
    runp.add_argument("--seed", type=int, default=0)
    runp.add_argument("--workdir", default=None)
    runp.add_argument("--golden-dir", default=None, help="override packaged golden files")
    runp.add_argument("--update-golden", action="store_true", help="rewrite golden files (maintainers)")
    args = parser.parse_args(argv)

    workdir = args.workdir or f"./demo-{args.scenario}"
    report = run_scenario(
        args.scenario,
        workdir,
        seed=args.seed,
        golden_dir=args.golden_dir,
        update_golden=args.update_golden,
    )
    for stage in report.stages:
        mark = "ok" if stage.ok else "FAILED"
        print(f"stage {stage.stage:<16} {mark:>6}  ({stage.seconds:.2f}s)")
        if stage.error:
            print(f"  {stage.error.splitlines()[0]}")
    for check in report.checks:
        print(f"[{'PASS' if check.passed else 'FAIL'}] {check.name}")
        if check.detail and not check.passed:
            for line in check.detail.splitlines()[:12]:
                print(f"    {line}")
    print(f"{'PASS' if report.ok else 'FAIL'} {report.scenario} (workdir: {report.workdir})")
    return 0 if report.ok else 1


def script_main() -> None:
    sys.exit(main())
