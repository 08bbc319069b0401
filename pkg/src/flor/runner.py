"""Pipeline execution and event ingestion.

Each recipe command runs as a subprocess that appends line-delimited JSON
events to the file named by ``FLOR_EVENTS``::

    {"k":"log","n":"text_src","v":"OCR"}

Keys: ``k`` kind, ``n`` name, ``v`` string value, optional ``t`` type hint.
The runner ingests the file after the step exits.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

from .buildspec import collect_mtimes, script_of, stale_targets, topo_order
from .errors import FlorError, ProtocolError
from .project import Project
from .store import (
    ARG_PREFIX,
    ARG_SOURCE_PREFIX,
    BLOB,
    FLOAT,
    INT,
    RUN_STATUS,
    TEXT,
    ArgRecord,
    LogRecord,
    LoopIteration,
    RunWriter,
    encode_value,
)

logger = logging.getLogger(__name__)

EVENT_KINDS = ("loop_begin", "iter_begin", "iter_end", "loop_end", "log", "arg", "ckpt", "flush")


@dataclass(frozen=True)
class Event:
    kind: str
    name: str = ""
    value: str = ""
    type_hint: int | None = None

    def to_json(self) -> str:
        obj = {"k": self.kind, "n": self.name, "v": self.value}
        if self.type_hint is not None:
            obj["t"] = self.type_hint
        return json.dumps(obj, separators=(",", ":"), ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str, ordinal: int = 0) -> Event:
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"event {ordinal}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict) or obj.get("k") not in EVENT_KINDS:
            raise ProtocolError(f"event {ordinal}: unknown kind {obj.get('k') if isinstance(obj, dict) else obj!r}")
        t = obj.get("t")
        if t is not None and t not in (INT, FLOAT, TEXT, BLOB):
            raise ProtocolError(f"event {ordinal}: bad type hint {t!r}")
        return cls(obj["k"], str(obj.get("n", "")), str(obj.get("v", "")), t)


def read_events(path: str | os.PathLike, *, lenient: bool = False) -> list[Event]:
    """Parse an event file. ``lenient`` drops a torn final line."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except FileNotFoundError:
        return []
    events = []
    for i, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            events.append(Event.from_json(line, i))
        except ProtocolError:
            if lenient and i == len(lines):
                break
            raise
    return events


def checkpoint_policy(loop_depth: int, iteration: int) -> bool:
    """Fixed policy: checkpoint at every outermost-loop iteration boundary."""
    return loop_depth == 1


def resolve_arg(
    name: str,
    default: str,
    overrides: Mapping[str, str],
    historical: ArgRecord | None = None,
) -> tuple[str, str]:
    """Return ``(value, source)`` with source one of historical/override/default."""
    if historical is not None:
        return historical.value, "historical"
    if name in overrides:
        return str(overrides[name]), "override"
    return default, "default"


def arg_resolve(name: str, default: str, overrides: Mapping[str, str], historical: ArgRecord | None = None) -> str:
    return resolve_arg(name, default, overrides, historical)[0]


def _typed(value: str, hint: int | None, name: str):
    try:
        if hint == INT:
            return int(value)
        if hint == FLOAT:
            return float(value)
    except ValueError:
        raise ProtocolError(f"{name!r}: value {value!r} does not match type hint {hint}") from None
    if hint == BLOB:
        return value.encode("utf-8")
    return value


@dataclass
class _Loop:
    name: str
    next_iteration: int = 0


@dataclass
class _Iter:
    ctx_id: int
    iteration: int


class Ingestor:
    """Turns one step's event stream into rows of a :class:`RunWriter`.

    In replay mode loop iterations are matched to the stored ones by
    (parent, loop name, ordinal) and only rows that are not already present
    are added.
    """

    def __init__(
        self,
        writer: RunWriter,
        filename: str,
        *,
        overrides: Mapping[str, str] | None = None,
        historical: Mapping[str, ArgRecord] | None = None,
        replay: bool = False,
        cwd: str | os.PathLike = ".",
        policy: Callable[[int, int], bool] = checkpoint_policy,
    ) -> None:
        self.writer = writer
        self.filename = filename
        self.overrides = dict(overrides or {})
        self.historical = dict(historical or {})
        self.replay = replay
        self.cwd = Path(cwd)
        self.policy = policy
        self.stack: list[_Loop | _Iter] = []
        self.ordinal = 0
        self.iterations = 0
        self.events = 0

    @property
    def depth(self) -> int:
        return sum(isinstance(f, _Iter) for f in self.stack)

    def _ctx(self) -> int:
        for frame in reversed(self.stack):
            if isinstance(frame, _Iter):
                return frame.ctx_id
        return 0

    def ingest(self, ev: Event) -> list:
        self.ordinal += 1
        self.events += 1
        top = self.stack[-1] if self.stack else None
        handler = getattr(self, "_on_" + ev.kind)
        return handler(ev, top)

    def _fail(self, ev: Event, why: str):
        raise ProtocolError(f"event {self.ordinal} ({ev.kind} {ev.name!r}) in {self.filename}: {why}")

    def _on_loop_begin(self, ev, top):
        if isinstance(top, _Loop):
            self._fail(ev, "loop opened directly inside a loop, outside any iteration")
        self.stack.append(_Loop(ev.name))
        return []

    def _on_loop_end(self, ev, top):
        if not isinstance(top, _Loop) or (ev.name and ev.name != top.name):
            self._fail(ev, "no matching open loop")
        self.stack.pop()
        return []

    def _on_iter_begin(self, ev, top):
        if not isinstance(top, _Loop) or (ev.name and ev.name != top.name):
            self._fail(ev, "iteration outside an open loop")
        parent = self._ctx()
        iteration = top.next_iteration
        ctx = None
        if self.replay:
            ctx = self.writer.find_loop(self.filename, parent, top.name, iteration)
        rows = []
        if ctx is None:
            ctx = self.writer.next_ctx_id(self.filename)
            it = LoopIteration(self.writer.projid, self.writer.tstamp, self.filename, ctx, parent, top.name, iteration, ev.value)
            self.writer.put_loop(it)
            rows.append(it)
        self.stack.append(_Iter(ctx, iteration))
        self.iterations += 1
        return rows

    def _on_iter_end(self, ev, top):
        if not isinstance(top, _Iter):
            self._fail(ev, "no open iteration")
        self.stack.pop()
        self.stack[-1].next_iteration += 1
        return []

    def _store(self, ctx: int, name: str, raw) -> list:
        if self.replay and self.writer.has_value(self.filename, ctx, name):
            return []
        value_type, payload = encode_value(raw, name=name, put_blob=self.writer.store.put_blob)
        rec = LogRecord(self.writer.projid, self.writer.tstamp, self.filename, ctx, name, payload, value_type)
        self.writer.put_record(rec)
        return [rec]

    def _on_log(self, ev, top):
        if isinstance(top, _Loop):
            self._fail(ev, "log outside an iteration of the open loop")
        return self._store(self._ctx(), ev.name, _typed(ev.value, ev.type_hint, ev.name))

    def _on_arg(self, ev, top):
        if self.replay and self.writer.has_value(self.filename, 0, ARG_PREFIX + ev.name):
            return []
        value, source = resolve_arg(ev.name, ev.value, self.overrides, self.historical.get(ev.name))
        rows = self._store(0, ARG_PREFIX + ev.name, _typed(value, ev.type_hint, ev.name))
        return rows + self._store(0, ARG_SOURCE_PREFIX + ev.name, source)

    def _on_ckpt(self, ev, top):
        if isinstance(top, _Loop):
            self._fail(ev, "checkpoint outside an iteration")
        frame = next((f for f in reversed(self.stack) if isinstance(f, _Iter)), None)
        if not self.policy(self.depth, frame.iteration if frame else 0):
            return []
        ctx = self._ctx()
        if self.replay and self.writer.has_value(self.filename, ctx, ev.name):
            return []
        path = self.cwd / ev.value
        try:
            contents = path.read_bytes()
        except OSError as exc:
            raise FlorError(f"checkpoint {ev.name!r}: cannot read {path}: {exc.strerror}") from None
        h = self.writer.store.put_blob(contents)
        rec = LogRecord(self.writer.projid, self.writer.tstamp, self.filename, ctx, ev.name, h, BLOB)
        self.writer.put_record(rec)
        return [rec]

    def _on_flush(self, ev, top):
        return []

    def finish(self) -> None:
        if self.stack:
            frame = self.stack[-1]
            what = f"loop {frame.name!r}" if isinstance(frame, _Loop) else f"iteration ctx {frame.ctx_id}"
            raise ProtocolError(f"{self.filename}: stream ended after event {self.ordinal} with {what} still open")


def ingest_event(state: Ingestor, ev: Event) -> list:
    return state.ingest(ev)


def ingest_stream(state: Ingestor, events: Iterable[Event], *, strict: bool = True) -> Ingestor:
    for ev in events:
        state.ingest(ev)
    if strict:
        state.finish()
    return state


# step execution


@dataclass(frozen=True)
class Executed:
    target: str
    filename: str
    exit_code: int
    duration: float


@dataclass
class RunReport:
    projid: str
    tstamp: int
    executed: list[Executed] = field(default_factory=list)
    records_ingested: int = 0
    vid: str = ""
    status: str = "ok"
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def shim_dir(project: Project) -> Path:
    """A bin directory where ``python`` and ``python3`` run this interpreter."""
    d = project.work_dir / "bin"
    d.mkdir(exist_ok=True)
    for name in ("python", "python3"):
        link = d / name
        if not link.exists():
            try:
                link.symlink_to(sys.executable)
            except FileExistsError:
                pass
    return d


def step_env(project: Project, events: Path, ckpt_dir: Path, args: Mapping[str, str], replay: bool) -> dict[str, str]:
    env = dict(os.environ)
    env.pop("FLOR_REPLAY", None)
    env["FLOR_EVENTS"] = str(events)
    env["FLOR_CKPT_DIR"] = str(ckpt_dir)
    env["FLOR_ARGS"] = json.dumps(dict(args), sort_keys=True)
    env["FLOR_PROJID"] = project.projid
    env.setdefault("PYTHONDONTWRITEBYTECODE", "1")
    if replay:
        env["FLOR_REPLAY"] = "1"
    env["PATH"] = str(shim_dir(project)) + os.pathsep + env.get("PATH", "")
    return env


def launch(cmd: str, cwd: Path, env: Mapping[str, str], *, echo: bool, quiet: bool = False) -> int:
    if echo:
        print(cmd, flush=True)
    out = subprocess.DEVNULL if quiet else None
    return subprocess.run(cmd, shell=True, cwd=cwd, env=dict(env), stdout=out).returncode


def run(
    project: Project,
    goal: str | None = None,
    overrides: Mapping[str, str] | None = None,
    *,
    quiet: bool = False,
) -> RunReport:
    """Execute the stale targets of ``goal`` and commit everything they logged."""
    overrides = {k: str(v) for k, v in (overrides or {}).items()}
    with project.lock():
        graph = project.graph()
        goal = goal or graph.default_target
        if goal is None:
            raise FlorError("Makefile declares no targets")
        order = topo_order(graph, goal)
        stale = stale_targets(graph, collect_mtimes(graph, project.root, goal), goal)
        writer = project.open_run()
        report = RunReport(project.projid, writer.tstamp)
        work = project.work_dir / str(writer.tstamp)
        for target in (t for t in order if t in stale):
            code = _run_target(project, graph, target, writer, overrides, work, report, quiet)
            if code != 0:
                report.status = f"failed:{target}"
                break
            (project.root / target).touch()
        writer.log(project.config.makefile_path, 0, RUN_STATUS, report.status)
        report.records_ingested = len(writer.records)
        report.tstamp, report.vid = project.commit(writer, root_target=goal)
        shutil.rmtree(work, ignore_errors=True)
        return report


def _run_target(project, graph, target, writer, overrides, work: Path, report: RunReport, quiet: bool) -> int:
    t = graph[target]
    silent = t.silent or (False,) * len(t.cmds)
    recipes = graph.recipes(target)
    main_file = next((f for f in map(script_of, recipes) if f), target)
    start = time.perf_counter()
    code = 0
    for i, (cmd, quiet_cmd) in enumerate(zip(recipes, silent)):
        filename = script_of(cmd) or target
        events = work / f"{target}.{i}.events.jsonl"
        ckpt_dir = work / f"{target}.{i}.ckpt"
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        env = step_env(project, events, ckpt_dir, overrides, replay=False)
        code = launch(cmd, project.root, env, echo=not (quiet_cmd or quiet), quiet=quiet)
        state = Ingestor(writer, filename, overrides=overrides, cwd=project.root)
        try:
            ingest_stream(state, read_events(events, lenient=code != 0), strict=code == 0)
        except FlorError as exc:
            report.error = str(exc)
            code = code or 1
        if code != 0:
            break
    report.executed.append(Executed(target, main_file, code, time.perf_counter() - start))
    return code
