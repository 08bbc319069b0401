"""Hindsight logging across versions.

A logging statement added to the current step file is merged into the file
as it was at each historical version, the step is re-executed in a detached
workspace, and the new values are stored under the historical tstamp. When
the producing target is cached and its loop was checkpointed, the runner
materializes the checkpoints so the step can skip the work inside each
checkpointed iteration.
"""

from __future__ import annotations

import ast
import difflib
import logging
import re
import shutil
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .buildspec import parse_makefile, script_of
from .errors import FlorError, NotFoundError
from .project import Project
from .query import dims_of
from .runner import Ingestor, ingest_stream, launch, read_events, step_env
from .store import REPLAY_OF, run_file_name
from .vcs import Conflict, Hunk, merge3

logger = logging.getLogger(__name__)

FULL = "full"
RESUME = "resume"
SKIP_REASONS = ("cached", "already-present", "not-applicable")
_LOGGING_CALL = re.compile(r"\b(log|arg|loop|checkpoint)\s*\(")


@dataclass(frozen=True)
class WorkItem:
    vid: str
    tstamp: int
    target: str
    filename: str
    mode: str = FULL
    resume_ctx: int | None = None
    names: tuple[str, ...] = ()


@dataclass(frozen=True)
class Skipped:
    vid: str
    target: str
    reason: str
    tstamp: int | None = None
    filename: str = ""


@dataclass(frozen=True)
class MergeConflict:
    vid: str
    filename: str
    hunks: tuple[Hunk, ...]


@dataclass
class ReplayPlan:
    requested: list[str]
    work: list[WorkItem] = field(default_factory=list)
    skipped: list[Skipped] = field(default_factory=list)
    conflicts: list[MergeConflict] = field(default_factory=list)
    sources: dict[tuple[str, str], str] = field(default_factory=dict, repr=False)

    def describe(self) -> str:
        lines = [f"replay plan for {', '.join(self.requested)}"]
        lines.append(f"work ({len(self.work)}):")
        for w in self.work:
            mode = w.mode if w.resume_ctx is None else f"{w.mode}-from-checkpoint(ctx {w.resume_ctx})"
            lines.append(f"  {w.vid[:12]}  tstamp={w.tstamp}  {w.target}  {w.filename}  {mode}")
        lines.append(f"skipped ({len(self.skipped)}):")
        for s in self.skipped:
            lines.append(f"  {s.vid[:12]}  tstamp={s.tstamp}  {s.target}  {s.reason}")
        lines.append(f"conflicts ({len(self.conflicts)}):")
        for c in self.conflicts:
            spans = ", ".join(f"base {h.base[0]}-{h.base[1]}" for h in c.hunks)
            lines.append(f"  {c.vid[:12]}  {c.filename}  {spans}")
        return "\n".join(lines) + "\n"


@dataclass
class LoggingDiff:
    filename: str
    hunks: list[list[str]]
    warnings: list[str]

    def __len__(self) -> int:
        return len(self.hunks)

    def __bool__(self) -> bool:
        return bool(self.hunks)


def _normalize(line: str) -> str:
    return " ".join(line.split())


def logging_diff(project: Project, filename: str) -> LoggingDiff:
    """Whitespace-insensitive diff of ``filename`` between head and the working tree."""
    if not project.repo.is_tracked(filename):
        raise NotFoundError(f"{filename} is not tracked")
    head = project.repo.head()
    old = project.repo.file_at(head, filename).splitlines()
    new = (project.root / filename).read_text().splitlines()
    matcher = difflib.SequenceMatcher(None, [_normalize(x) for x in old], [_normalize(x) for x in new], autojunk=False)
    hunks, warnings = [], []
    for group in matcher.get_grouped_opcodes(0):
        hunk = []
        for tag, i1, i2, j1, j2 in group:
            if tag == "equal":
                continue
            hunk += ["-" + line for line in old[i1:i2]]
            for line in new[j1:j2]:
                hunk.append("+" + line)
                if line.strip() and not _LOGGING_CALL.search(line):
                    warnings.append(f"{filename}: non-logging line added: {line.strip()}")
        if hunk:
            hunks.append(hunk)
    for w in warnings:
        logger.warning(w)
    return LoggingDiff(filename, hunks, warnings)


def mentions(text: str, name: str) -> bool:
    """True when ``text`` has a logging call whose first argument is the literal ``name``."""
    pattern = r"\b(?:log|checkpoint)\s*\(\s*([\"'])" + re.escape(name) + r"\1"
    return re.search(pattern, text) is not None


def propagation_base(project: Project, filename: str, names: Sequence[str]) -> str:
    """Text the new logging statements were added on top of.

    This is the head version when the working tree adds them, otherwise the
    newest committed version that does not yet mention any of ``names``.
    """
    repo = project.repo
    working = (project.root / filename).read_text()
    candidates = repo.history(filename)
    for vid in candidates:
        try:
            text = repo.file_at(vid, filename)
        except NotFoundError:
            continue
        if not any(mentions(text, n) for n in names):
            return text
    return working


def _step_files(project: Project) -> list[str]:
    graph = project.graph()
    files = []
    for target in graph.targets:
        for cmd in graph.recipes(target):
            f = script_of(cmd)
            if f and f not in files and (project.root / f).exists():
                files.append(f)
    return files


def plan(
    project: Project,
    requested: Sequence[str],
    since: int | None = None,
    until: int | None = None,
    *,
    allow_resume: bool = True,
) -> ReplayPlan:
    requested = list(requested)
    result = ReplayPlan(requested)
    if since is not None and until is not None and since > until:
        return result
    graph = project.graph()
    producers: dict[str, list[str]] = {}
    for f in _step_files(project):
        text = (project.root / f).read_text()
        found = [n for n in requested if mentions(text, n)]
        if found:
            producers[f] = found
    missing = [n for n in requested if not any(n in v for v in producers.values())]
    if missing:
        raise FlorError(f"no current step file logs {', '.join(missing)}")

    store = project.store
    for filename, names in producers.items():
        target = graph.producer_of(filename) or filename
        base = propagation_base(project, filename, names)
        ours = (project.root / filename).read_text()
        depth = _name_depth(project, filename, ours, names)
        for iv in project.intervals():
            if since is not None and iv.ts_end < since:
                continue
            if until is not None and iv.ts_start > until:
                continue
            tstamps = sorted({
                r[0] for r in store.execute(
                    "SELECT DISTINCT tstamp FROM logs WHERE projid = ? AND filename = ? AND tstamp BETWEEN ? AND ?",
                    (iv.projid, filename, iv.ts_start, iv.ts_end),
                )
            })
            if not tstamps:
                result.skipped.append(Skipped(iv.vid, target, "not-applicable", iv.ts_start, filename))
                continue
            try:
                theirs = project.repo.file_at(iv.vid, filename)
            except NotFoundError:
                result.skipped.append(Skipped(iv.vid, target, "not-applicable", iv.ts_start, filename))
                continue
            for t in tstamps:
                present = {
                    r[0] for r in store.execute(
                        "SELECT DISTINCT value_name FROM logs WHERE projid = ? AND tstamp = ? AND filename = ?",
                        (iv.projid, t, filename),
                    )
                }
                todo = tuple(n for n in names if n not in present)
                if not todo:
                    result.skipped.append(Skipped(iv.vid, target, "already-present", t, filename))
                    continue
                merged = merge3(base, ours, theirs)
                if isinstance(merged, Conflict):
                    result.conflicts.append(MergeConflict(iv.vid, filename, tuple(merged.hunks)))
                    continue
                result.sources[(iv.vid, filename)] = merged
                mode, ctx = _mode(project, iv.vid, t, filename, depth) if allow_resume else (FULL, None)
                result.work.append(WorkItem(iv.vid, t, target, filename, mode, ctx, todo))
    return result


def _name_depth(project: Project, filename: str, source: str, names: Sequence[str]) -> int | None:
    """Deepest loop nesting at which any of ``names`` is logged.

    Names already in the store use their recorded dimensions. New names are
    located in the step source by counting the ``loop(...)`` for-statements
    that enclose the call mentioning them. ``None`` means unknown.
    """
    depth = 0
    for n in names:
        try:
            paths = dims_of(project.store, n)
            depth = max(depth, len(paths.get(filename, [])))
            continue
        except NotFoundError:
            pass
        found = static_depth(source, n)
        if found is None:
            return None
        depth = max(depth, found)
    return depth


def static_depth(source: str, name: str) -> int | None:
    try:
        tree = ast.parse(source)
    except SyntaxError:
        return None

    def is_loop(node: ast.AST) -> bool:
        it = getattr(node, "iter", None)
        if not isinstance(node, (ast.For, ast.AsyncFor)) or not isinstance(it, ast.Call):
            return False
        fn = it.func
        return (fn.id if isinstance(fn, ast.Name) else getattr(fn, "attr", "")) == "loop"

    best = None

    def visit(node: ast.AST, depth: int) -> None:
        nonlocal best
        if isinstance(node, ast.Call) and any(
            isinstance(a, ast.Constant) and a.value == name for a in node.args
        ):
            best = depth if best is None else max(best, depth)
        for child in ast.iter_child_nodes(node):
            inner = depth + 1 if is_loop(node) and child in node.body else depth
            visit(child, inner)

    visit(tree, 0)
    return best


def _mode(project: Project, vid: str, tstamp: int, filename: str, depth: int | None) -> tuple[str, int | None]:
    if depth is None or depth > 1:
        return FULL, None
    try:
        graph = parse_makefile(project.repo.file_at(vid, project.config.makefile_path), vid)
    except FlorError:
        return FULL, None
    target = graph.producer_of(filename)
    if target is None or not graph.targets[target].cached:
        return FULL, None
    loops = {it.ctx_id: it for it in project.store.loops(project.projid, tstamp, filename)}
    ckpts = [b for b in project.store.blobs(project.projid, tstamp, filename)
             if b.ctx_id in loops and loops[b.ctx_id].parent_ctx_id == 0]
    if not ckpts:
        return FULL, None
    return RESUME, max(b.ctx_id for b in ckpts)


@dataclass
class ItemResult:
    item: WorkItem
    exit_code: int
    iterations: int = 0
    events: int = 0
    records_added: int = 0
    error: str | None = None


@dataclass
class ReplayReport:
    head: str
    results: list[ItemResult] = field(default_factory=list)
    vid: str | None = None

    @property
    def ok(self) -> bool:
        return all(r.exit_code == 0 for r in self.results)

    @property
    def records_added(self) -> int:
        return sum(r.records_added for r in self.results)


def _materialize_checkpoints(project: Project, item: WorkItem, dest: Path) -> None:
    loops = {it.ctx_id: it for it in project.store.loops(project.projid, item.tstamp, item.filename)}
    for b in project.store.blobs(project.projid, item.tstamp, item.filename):
        it = loops.get(b.ctx_id)
        if it is None or b.ctx_id > item.resume_ctx:
            continue
        path = dest / it.loop_name / str(it.loop_iteration) / b.value_name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(project.store.get_blob(b.hash))


def _launch_item(project: Project, plan_: ReplayPlan, item: WorkItem, ws: Path) -> tuple[int, Path, dict]:
    project.repo.export(item.vid, ws)
    (ws / item.filename).write_text(plan_.sources[(item.vid, item.filename)])
    graph = parse_makefile((ws / project.config.makefile_path).read_text(), item.vid)
    target = graph.producer_of(item.filename)
    cmds = [c for c in graph.recipes(target) if script_of(c) == item.filename] if target else []
    if not cmds:
        cmds = [f"python {item.filename}"]
    historical = project.store.args(project.projid, item.tstamp, item.filename)
    ckpt_dir = ws / ".flor-ckpt"
    ckpt_dir.mkdir()
    if item.mode == RESUME:
        _materialize_checkpoints(project, item, ckpt_dir)
    events = ws / ".flor-events.jsonl"
    env = step_env(project, events, ckpt_dir, {k: a.value for k, a in historical.items()}, replay=True)
    code = 0
    for cmd in cmds:
        code = launch(cmd, ws, env, echo=False, quiet=True)
        if code:
            break
    return code, events, historical


def execute(project: Project, plan_: ReplayPlan, workers: int = 1) -> ReplayReport:
    """Run every work item and store what it logs under its historical tstamp."""
    head = project.repo.head() or ""
    report = ReplayReport(head)
    if not plan_.work:
        return report
    with project.lock():
        root = Path(tempfile.mkdtemp(prefix="replay-", dir=project.work_dir))
        try:
            spaces = [root / str(i) for i in range(len(plan_.work))]
            for ws in spaces:
                ws.mkdir()
            with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
                launched = list(pool.map(lambda a: _launch_item(project, plan_, *a), zip(plan_.work, spaces)))
            written = []
            # ingestion is sequential in plan order so the outcome is independent of scheduling
            for item, ws, (code, events, historical) in zip(plan_.work, spaces, launched):
                res = ItemResult(item, code)
                report.results.append(res)
                if code != 0:
                    res.error = f"step exited with {code}"
                    continue
                writer = project.store.open_run(project.projid, item.tstamp, extend=True)
                state = Ingestor(writer, item.filename, historical=historical, replay=True, cwd=ws)
                try:
                    ingest_stream(state, read_events(events))
                except FlorError as exc:
                    res.exit_code, res.error = 1, str(exc)
                    continue
                res.iterations, res.events = state.iterations, state.events
                res.records_added = len(writer.records)
                if not writer.records:
                    continue
                writer.log(item.filename, 0, REPLAY_OF, head)
                name = run_file_name(project.projid, item.tstamp, f"replay.{head[:10]}.{_slug(item.filename)}")
                written.append(project.store.write_run(writer, name=_unique(project, name)))
            if written:
                paths = [str(p.relative_to(project.root)) for p in written]
                report.vid = project.repo.snapshot(f"flor replay of {', '.join(plan_.requested)}\n", paths=paths)
        finally:
            shutil.rmtree(root, ignore_errors=True)
    return report


def _slug(filename: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", filename)


def _unique(project: Project, name: str) -> str:
    stem = name[: -len(".jsonl")]
    candidate, n = name, 1
    while (project.store.records_dir / candidate).exists():
        n += 1
        candidate = f"{stem}.{n}.jsonl"
    return candidate
