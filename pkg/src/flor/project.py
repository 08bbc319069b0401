"""A flor project: a git working tree with a ``.flor`` directory and a Makefile."""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

from filelock import FileLock, Timeout

from .buildspec import BuildGraph, parse_makefile
from .errors import FlorError, LockedError, NotFoundError
from .store import RunWriter, Store
from .vcs import Repo, VersionInterval, format_commit_message, intervals

logger = logging.getLogger(__name__)

FLOR_DIR = ".flor"
CLOCK_MODES = ("wall", "logical")

_GITIGNORE = """\
objects/
index.db
index.db-journal
lock
work/
*.tmp
"""


@dataclass
class ProjectConfig:
    projid: str
    makefile_path: str = "Makefile"
    clock_mode: str = "wall"

    def __post_init__(self) -> None:
        if not self.projid:
            raise FlorError("projid must be non-empty")
        if self.clock_mode not in CLOCK_MODES:
            raise FlorError(f"clock_mode must be one of {CLOCK_MODES}, got {self.clock_mode!r}")


class Project:
    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root).resolve()
        self.flor_dir = self.root / FLOR_DIR
        cfg_path = self.flor_dir / "config.json"
        if not cfg_path.exists():
            raise NotFoundError(f"{self.root} is not a flor project (run `flor init`)")
        self.config = ProjectConfig(**json.loads(cfg_path.read_text()))
        self.store = Store(self.flor_dir)
        self.repo = Repo(self.root)

    @classmethod
    def init(
        cls,
        root: str | os.PathLike,
        projid: str | None = None,
        clock_mode: str = "wall",
        makefile_path: str = "Makefile",
    ) -> Project:
        root = Path(root).resolve()
        config = ProjectConfig(projid or root.name, makefile_path, clock_mode)
        mk = root / makefile_path
        if mk.exists():
            parse_makefile(mk.read_text())
        flor_dir = root / FLOR_DIR
        flor_dir.mkdir(exist_ok=True)
        (flor_dir / "records").mkdir(exist_ok=True)
        (flor_dir / ".gitignore").write_text(_GITIGNORE)
        cfg_path = flor_dir / "config.json"
        if not cfg_path.exists():
            cfg_path.write_text(json.dumps(asdict(config), indent=2) + "\n")
        Repo(root).init()
        return cls(root)

    @classmethod
    def locate(cls, start: str | os.PathLike | None = None) -> Project:
        here = Path(start or os.getcwd()).resolve()
        for d in (here, *here.parents):
            if (d / FLOR_DIR / "config.json").exists():
                return cls(d)
        raise NotFoundError(f"no flor project found at or above {here} (run `flor init`)")

    def close(self) -> None:
        self.store.close()

    def __enter__(self) -> Project:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    @property
    def projid(self) -> str:
        return os.environ.get("FLOR_PROJID") or self.config.projid

    @property
    def work_dir(self) -> Path:
        d = self.flor_dir / "work"
        d.mkdir(exist_ok=True)
        return d

    @contextmanager
    def lock(self, timeout: float = 10.0):
        lock = FileLock(str(self.flor_dir / "lock"))
        try:
            lock.acquire(timeout=timeout)
        except Timeout:
            raise LockedError(f"project {self.projid!r} is locked by another writer") from None
        try:
            yield
        finally:
            lock.release()

    def next_tstamp(self) -> int:
        last = self.store.max_tstamp()
        if self.config.clock_mode == "logical":
            return last + 1
        # same-second commits are bumped forward to keep tstamps strictly increasing
        return max(int(time.time()), last + 1)

    def graph(self, vid: str | None = None) -> BuildGraph:
        if vid is None:
            path = self.root / self.config.makefile_path
            if not path.exists():
                raise NotFoundError(f"no {self.config.makefile_path} in {self.root}")
            return parse_makefile(path.read_text())
        return parse_makefile(self.repo.file_at(vid, self.config.makefile_path), vid)

    def intervals(self) -> list[VersionInterval]:
        return intervals(self.store, self.projid)

    def open_run(self, tstamp: int | None = None) -> RunWriter:
        return self.store.open_run(self.projid, self.next_tstamp() if tstamp is None else tstamp)

    def commit(self, writer: RunWriter | None = None, root_target: str = "commit", extends: int | None = None) -> tuple[int, str]:
        """Write pending rows, snapshot the tree and record the version interval.

        ``extends`` names the ``ts_start`` of an interval to stretch instead of
        appending a new one. With nothing pending and a clean tree this is a
        no-op returning the latest tstamp and the head vid.
        """
        if writer is None:
            writer = self.open_run()
        head = self.repo.head()
        if len(writer) == 0 and head is not None and self.repo.is_clean():
            return self.store.max_tstamp(), head
        if len(writer):
            self.store.write_run(writer)
        message = format_commit_message(self.projid, writer.tstamp, root_target, extends)
        vid = self.repo.snapshot(message)
        self._record_interval(self.projid, writer.tstamp, vid, root_target, extends)
        return writer.tstamp, vid

    def _record_interval(self, projid: str, tstamp: int, vid: str, root_target: str, extends: int | None) -> None:
        if extends is not None:
            for iv in intervals(self.store, projid):
                if iv.ts_start == extends:
                    self.store.put_interval(projid, iv.ts_start, tstamp, vid, iv.root_target)
                    break
            else:
                raise NotFoundError(f"no interval starting at {extends} to extend")
        else:
            self.store.put_interval(projid, tstamp, tstamp, vid, root_target)
        try:
            graph = self.graph(vid)
        except FlorError:
            return
        self.store.put_build_deps(vid, graph.rows())

    def rebuild_index(self) -> None:
        """Re-derive the whole index from run files and the git history."""
        self.store.rebuild()
        self.store.clear_intervals()
        for info in self.repo.commits():
            self._record_interval(info.projid, info.tstamp, info.vid, info.root_target, info.extends)
