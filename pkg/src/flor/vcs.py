"""Git-backed versioning, timestamp to version mapping, and three-way merge."""

from __future__ import annotations

import io
import os
import subprocess
import tarfile
from dataclasses import dataclass
from difflib import SequenceMatcher
from pathlib import Path

from .errors import NotFoundError, RepositoryError
from .store import Store

COMMIT_TAG = "flor commit"


@dataclass(frozen=True)
class VersionInterval:
    projid: str
    ts_start: int
    ts_end: int
    vid: str
    root_target: str

    def contains(self, t: int) -> bool:
        return self.ts_start <= t <= self.ts_end


@dataclass(frozen=True)
class VersionedFile:
    vid: str
    filename: str
    parent_vid: str
    contents: str


@dataclass(frozen=True)
class CommitInfo:
    vid: str
    projid: str
    tstamp: int
    root_target: str
    extends: int | None


def format_commit_message(projid: str, tstamp: int, root_target: str, extends: int | None = None) -> str:
    lines = [f"{COMMIT_TAG} {projid}@{tstamp}", "", f"projid: {projid}", f"tstamp: {tstamp}", f"target: {root_target}"]
    if extends is not None:
        lines.append(f"extends: {extends}")
    return "\n".join(lines) + "\n"


def parse_commit_message(vid: str, message: str) -> CommitInfo | None:
    if not message.startswith(COMMIT_TAG):
        return None
    fields = {}
    for line in message.splitlines()[1:]:
        key, sep, value = line.partition(": ")
        if sep:
            fields[key.strip()] = value.strip()
    try:
        extends = int(fields["extends"]) if "extends" in fields else None
        return CommitInfo(vid, fields["projid"], int(fields["tstamp"]), fields.get("target", ""), extends)
    except (KeyError, ValueError):
        return None


class Repo:
    """Thin wrapper over the ``git`` executable for one working tree."""

    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)

    def git(self, *args: str, input: bytes | None = None, check: bool = True) -> str:
        return self.git_bytes(*args, input=input, check=check).decode("utf-8", "surrogateescape")

    def git_bytes(self, *args: str, input: bytes | None = None, check: bool = True) -> bytes:
        env = {**os.environ, "GIT_TERMINAL_PROMPT": "0", "LC_ALL": "C"}
        try:
            proc = subprocess.run(
                ["git", *args], cwd=self.root, input=input, capture_output=True, env=env
            )
        except OSError as exc:
            raise RepositoryError(f"cannot run git: {exc}") from exc
        if check and proc.returncode != 0:
            err = proc.stderr.decode("utf-8", "replace").strip()
            raise RepositoryError(f"git {args[0]} failed: {err}")
        return proc.stdout

    def _ok(self, *args: str) -> bool:
        return subprocess.run(["git", *args], cwd=self.root, capture_output=True).returncode == 0

    def is_repo(self) -> bool:
        return (self.root / ".git").exists()

    def init(self) -> None:
        if not self.is_repo():
            self.git("init", "-q")
        if not self._ok("config", "user.email"):
            self.git("config", "user.email", "flor@localhost")
        if not self._ok("config", "user.name"):
            self.git("config", "user.name", "flor")

    def head(self) -> str | None:
        if not self._ok("rev-parse", "--verify", "-q", "HEAD"):
            return None
        return self.git("rev-parse", "HEAD").strip()

    def is_clean(self) -> bool:
        return self.git("status", "--porcelain").strip() == ""

    def snapshot(self, message: str, paths: list[str] | None = None) -> str:
        """Commit the working tree (or only ``paths``) and return the new vid.

        Returns the current head unchanged when there is nothing to commit.
        """
        if not self.is_repo():
            raise RepositoryError(f"{self.root} is not a git repository")
        head = self.head()
        if paths is None:
            self.git("add", "-A")
        else:
            self.git("add", "--", *paths)
        if head is not None and self._ok("diff", "--cached", "--quiet"):
            return head
        args = ["commit", "-q", "--no-verify", "-m", message]
        if head is None:
            args.append("--allow-empty")
        if paths is not None:
            args += ["--", *paths]
        self.git(*args)
        return self.head()

    def exists(self, vid: str) -> bool:
        return self._ok("cat-file", "-e", f"{vid}^{{commit}}")

    def parent(self, vid: str) -> str:
        if not self._ok("rev-parse", "--verify", "-q", f"{vid}^"):
            return ""
        return self.git("rev-parse", f"{vid}^").strip()

    def file_bytes_at(self, vid: str, filename: str) -> bytes:
        spec = f"{vid}:{Path(filename).as_posix()}"
        if not self._ok("cat-file", "-e", spec):
            raise NotFoundError(f"{filename} does not exist at {vid[:12]}")
        return self.git_bytes("cat-file", "blob", spec)

    def file_at(self, vid: str, filename: str) -> str:
        return self.file_bytes_at(vid, filename).decode("utf-8")

    def versioned_file(self, vid: str, filename: str) -> VersionedFile:
        return VersionedFile(vid, filename, self.parent(vid), self.file_at(vid, filename))

    def files_at(self, vid: str) -> list[str]:
        return self.git("ls-tree", "-r", "--name-only", vid).splitlines()

    def is_tracked(self, filename: str) -> bool:
        return self._ok("ls-files", "--error-unmatch", "--", filename)

    def export(self, vid: str, dest: str | os.PathLike) -> None:
        """Materialize the tree of ``vid`` into ``dest``."""
        data = self.git_bytes("archive", "--format=tar", vid)
        with tarfile.open(fileobj=io.BytesIO(data)) as tar:
            tar.extractall(dest)

    def history(self, filename: str | None = None) -> list[str]:
        """Commit ids newest first, optionally restricted to those touching ``filename``."""
        if self.head() is None:
            return []
        args = ["log", "--format=%H"]
        if filename is not None:
            args += ["--", filename]
        return self.git(*args).split()

    def commits(self) -> list[CommitInfo]:
        """Flor commits in chronological order."""
        if self.head() is None:
            return []
        out = self.git("log", "--reverse", "--format=%H%x00%B%x1e")
        infos = []
        for entry in out.split("\x1e"):
            entry = entry.strip("\n")
            if not entry:
                continue
            vid, _, message = entry.partition("\x00")
            info = parse_commit_message(vid, message)
            if info is not None:
                infos.append(info)
        return infos


def intervals(store: Store, projid: str | None = None) -> list[VersionInterval]:
    return [VersionInterval(*row) for row in store.interval_rows(projid)]


def resolve(store: Store, projid: str, t: int) -> VersionInterval:
    for iv in intervals(store, projid):
        if iv.contains(t):
            return iv
    raise NotFoundError(f"no version interval of {projid!r} contains tstamp {t}")


# three-way merge


@dataclass(frozen=True)
class Hunk:
    """Line ranges ``[lo, hi)`` of one conflicting region in each input."""

    base: tuple[int, int]
    ours: tuple[int, int]
    theirs: tuple[int, int]


@dataclass(frozen=True)
class Conflict:
    hunks: list[Hunk]
    text: str  # merge result with conflict markers

    def __bool__(self) -> bool:
        return True


def _sync_regions(base: list[str], a: list[str], b: list[str]) -> list[tuple[int, int, int, int, int, int]]:
    """Regions where all three sequences agree, as (base, a, b) ranges."""
    am = SequenceMatcher(None, base, a, autojunk=False).get_matching_blocks()
    bm = SequenceMatcher(None, base, b, autojunk=False).get_matching_blocks()
    ia = ib = 0
    out = []
    while ia < len(am) and ib < len(bm):
        abase, amatch, alen = am[ia]
        bbase, bmatch, blen = bm[ib]
        lo = max(abase, bbase)
        hi = min(abase + alen, bbase + blen)
        if lo < hi:
            asub = amatch + (lo - abase)
            bsub = bmatch + (lo - bbase)
            n = hi - lo
            out.append((lo, lo + n, asub, asub + n, bsub, bsub + n))
        if abase + alen < bbase + blen:
            ia += 1
        else:
            ib += 1
    n = len(base)
    out.append((n, n, len(a), len(a), len(b), len(b)))
    return out


def merge3(base: str, ours: str, theirs: str) -> str | Conflict:
    """Line-based three-way merge of ``ours`` and ``theirs`` against ``base``.

    Returns the merged text, or a :class:`Conflict` when both sides change
    the same region differently.
    """
    b_lines = base.splitlines(keepends=True)
    a_lines = ours.splitlines(keepends=True)
    t_lines = theirs.splitlines(keepends=True)
    out: list[str] = []
    hunks: list[Hunk] = []
    iz = ia = ib = 0
    for zmatch, zend, amatch, aend, bmatch, bend in _sync_regions(b_lines, a_lines, t_lines):
        base_chunk = b_lines[iz:zmatch]
        a_chunk = a_lines[ia:amatch]
        t_chunk = t_lines[ib:bmatch]
        if a_chunk == t_chunk:
            out += a_chunk
        elif a_chunk == base_chunk:
            out += t_chunk
        elif t_chunk == base_chunk:
            out += a_chunk
        else:
            hunks.append(Hunk((iz, zmatch), (ia, amatch), (ib, bmatch)))
            out.append("<<<<<<< ours\n")
            out += _terminated(a_chunk)
            out.append("||||||| base\n")
            out += _terminated(base_chunk)
            out.append("=======\n")
            out += _terminated(t_chunk)
            out.append(">>>>>>> theirs\n")
        out += a_lines[amatch:aend]
        iz, ia, ib = zend, aend, bend
    text = "".join(out)
    return Conflict(hunks, text) if hunks else text


def _terminated(lines: list[str]) -> list[str]:
    if lines and not lines[-1].endswith("\n"):
        return lines[:-1] + [lines[-1] + "\n"]
    return lines
