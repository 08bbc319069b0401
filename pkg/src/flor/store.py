"""Durable storage for log records, loop contexts and content-addressed blobs.

Layout under the ``.flor`` directory::

    records/            committed run files, one JSON object per line
    objects/<hh>/<hash> blob contents, addressed by sha256
    index.db            sqlite index, rebuildable from ``records/``

Run files are the source of truth for ``logs``, ``loops`` and ``obj_store``.
``ts2vid`` and ``build_deps`` live only in the index and are re-derived from
the git history by :func:`flor.project.Project.rebuild_index`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import sqlite3
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

from .errors import IntegrityError, NotFoundError

logger = logging.getLogger(__name__)

INT, FLOAT, TEXT, BLOB = 1, 2, 3, 4
INLINE_LIMIT = 4096

ARG_PREFIX = "arg::"
ARG_SOURCE_PREFIX = "argsrc::"
RUN_STATUS = "run::status"
REPLAY_OF = "replay::of"
RESERVED_PREFIXES = (ARG_PREFIX, ARG_SOURCE_PREFIX, "run::", "replay::")


@dataclass(frozen=True)
class LogRecord:
    projid: str
    tstamp: int
    filename: str
    ctx_id: int
    value_name: str
    value: str
    value_type: int
    seq: int = 0


@dataclass(frozen=True)
class LoopIteration:
    projid: str
    tstamp: int
    filename: str
    ctx_id: int
    parent_ctx_id: int
    loop_name: str
    loop_iteration: int
    iteration_value: str


@dataclass(frozen=True)
class BlobEntry:
    projid: str
    tstamp: int
    filename: str
    ctx_id: int
    value_name: str
    hash: str


@dataclass(frozen=True)
class ArgRecord:
    projid: str
    tstamp: int
    filename: str
    name: str
    value: str
    was_default: bool


def is_reserved(name: str) -> bool:
    return name.startswith(RESERVED_PREFIXES)


def digest(contents: bytes) -> str:
    return hashlib.sha256(contents).hexdigest()


def encode_value(raw, *, name: str = "value", put_blob: Callable[[bytes], str] | None = None) -> tuple[int, str]:
    """Serialize ``raw`` into a ``(value_type, payload)`` pair.

    Long text and byte strings are moved to the object store through
    ``put_blob`` and referenced by hash.
    """
    if isinstance(raw, bool):
        return INT, str(int(raw))
    if isinstance(raw, int):
        return INT, str(raw)
    if isinstance(raw, float):
        return FLOAT, repr(raw)
    if isinstance(raw, str):
        data = raw.encode("utf-8")
        if len(data) <= INLINE_LIMIT:
            return TEXT, raw
        raw = data
    if isinstance(raw, (bytes, bytearray, memoryview)):
        if put_blob is None:
            raise TypeError(f"{name!r}: blob value needs an object store")
        return BLOB, put_blob(bytes(raw))
    raise TypeError(f"{name!r}: unsupported value type {type(raw).__name__}")


def decode_value(value_type: int, payload: str, *, get_blob: Callable[[str], bytes] | None = None):
    if value_type == INT:
        return int(payload)
    if value_type == FLOAT:
        return float(payload)
    if value_type == TEXT:
        return payload
    if value_type == BLOB:
        if get_blob is None:
            raise TypeError("blob reference needs an object store")
        return get_blob(payload)
    raise ValueError(f"unknown value_type {value_type}")


_SCHEMA = """
CREATE TABLE IF NOT EXISTS logs (
    projid TEXT NOT NULL, tstamp INTEGER NOT NULL, filename TEXT NOT NULL,
    ctx_id INTEGER NOT NULL, value_name TEXT NOT NULL, value TEXT NOT NULL,
    value_type INTEGER NOT NULL, seq INTEGER NOT NULL,
    PRIMARY KEY (projid, tstamp, filename, seq)
);
CREATE INDEX IF NOT EXISTS logs_name ON logs (value_name);
CREATE TABLE IF NOT EXISTS loops (
    projid TEXT NOT NULL, tstamp INTEGER NOT NULL, filename TEXT NOT NULL,
    ctx_id INTEGER NOT NULL, parent_ctx_id INTEGER NOT NULL, loop_name TEXT NOT NULL,
    loop_iteration INTEGER NOT NULL, iteration_value TEXT NOT NULL,
    PRIMARY KEY (projid, tstamp, filename, ctx_id)
);
CREATE TABLE IF NOT EXISTS obj_store (
    projid TEXT NOT NULL, tstamp INTEGER NOT NULL, filename TEXT NOT NULL,
    ctx_id INTEGER NOT NULL, value_name TEXT NOT NULL, hash TEXT NOT NULL, seq INTEGER NOT NULL,
    PRIMARY KEY (projid, tstamp, filename, seq)
);
CREATE TABLE IF NOT EXISTS ts2vid (
    projid TEXT NOT NULL, ts_start INTEGER NOT NULL, ts_end INTEGER NOT NULL,
    vid TEXT NOT NULL, root_target TEXT NOT NULL,
    PRIMARY KEY (projid, ts_start)
);
CREATE TABLE IF NOT EXISTS build_deps (
    vid TEXT NOT NULL, target TEXT NOT NULL, deps TEXT NOT NULL, cmds TEXT NOT NULL,
    cached INTEGER NOT NULL, PRIMARY KEY (vid, target)
);
CREATE TABLE IF NOT EXISTS run_files (name TEXT PRIMARY KEY);
"""


@dataclass
class _FileState:
    loops: dict[int, LoopIteration] = field(default_factory=dict)
    children: dict[tuple[int, str], list[int]] = field(default_factory=dict)
    keys: set[tuple[int, str]] = field(default_factory=set)
    last_seq: int = 0


class RunWriter:
    """Buffers the rows of one ``(projid, tstamp)`` until they are written.

    With ``extend=True`` the writer starts from the rows already stored under
    that key, so new loops and records append to a historical run.
    """

    def __init__(self, store: Store, projid: str, tstamp: int, *, extend: bool = False) -> None:
        self.store = store
        self.projid = projid
        self.tstamp = tstamp
        self.extend = extend
        self.loops: list[LoopIteration] = []
        self.records: list[LogRecord] = []
        self.blobs: list[BlobEntry] = []
        self._files: dict[str, _FileState] = {}

    def _state(self, filename: str) -> _FileState:
        st = self._files.get(filename)
        if st is None:
            st = _FileState()
            if self.extend:
                for it in self.store.loops(projid=self.projid, tstamp=self.tstamp, filename=filename):
                    self._add_loop(st, it)
                for rec in self.store.scan(projid=self.projid, tstamp=self.tstamp, filename=filename):
                    st.keys.add((rec.ctx_id, rec.value_name))
                    st.last_seq = max(st.last_seq, rec.seq)
            self._files[filename] = st
        return st

    @staticmethod
    def _add_loop(st: _FileState, it: LoopIteration) -> None:
        st.loops[it.ctx_id] = it
        st.children.setdefault((it.parent_ctx_id, it.loop_name), []).append(it.ctx_id)

    def next_ctx_id(self, filename: str) -> int:
        st = self._state(filename)
        return max(st.loops, default=0) + 1

    def find_loop(self, filename: str, parent_ctx_id: int, loop_name: str, loop_iteration: int) -> int | None:
        st = self._state(filename)
        for ctx in st.children.get((parent_ctx_id, loop_name), ()):
            if st.loops[ctx].loop_iteration == loop_iteration:
                return ctx
        return None

    def loop(self, filename: str, ctx_id: int) -> LoopIteration:
        return self._state(filename).loops[ctx_id]

    def has_value(self, filename: str, ctx_id: int, value_name: str) -> bool:
        return (ctx_id, value_name) in self._state(filename).keys

    def put_loop(self, it: LoopIteration) -> None:
        self._check_key(it.projid, it.tstamp)
        st = self._state(it.filename)
        if it.ctx_id <= 0:
            raise IntegrityError(f"ctx_id must be positive, got {it.ctx_id}")
        if it.ctx_id in st.loops:
            raise IntegrityError(f"duplicate ctx_id {it.ctx_id} in {it.filename}")
        if it.parent_ctx_id:
            if it.parent_ctx_id not in st.loops or it.parent_ctx_id >= it.ctx_id:
                raise IntegrityError(f"dangling parent_ctx_id {it.parent_ctx_id} for ctx {it.ctx_id}")
        siblings = st.children.get((it.parent_ctx_id, it.loop_name), [])
        last = st.loops[siblings[-1]].loop_iteration if siblings else -1
        # a loop entered again under the same parent starts a fresh run at 0
        if it.loop_iteration not in (0, last + 1):
            raise IntegrityError(
                f"loop {it.loop_name!r} iteration {it.loop_iteration} does not follow {last}"
            )
        self._add_loop(st, it)
        self.loops.append(it)

    def put_record(self, rec: LogRecord) -> int:
        self._check_key(rec.projid, rec.tstamp)
        st = self._state(rec.filename)
        if rec.ctx_id and rec.ctx_id not in st.loops:
            raise IntegrityError(f"dangling ctx_id {rec.ctx_id} for {rec.value_name!r}")
        if rec.value_type == BLOB and not self.store.has_blob(rec.value):
            raise IntegrityError(f"blob {rec.value} for {rec.value_name!r} is not stored")
        st.last_seq += 1
        stored = LogRecord(**{**asdict(rec), "seq": st.last_seq})
        st.keys.add((rec.ctx_id, rec.value_name))
        self.records.append(stored)
        if rec.value_type == BLOB:
            self.blobs.append(BlobEntry(rec.projid, rec.tstamp, rec.filename, rec.ctx_id, rec.value_name, rec.value))
        return stored.seq

    def log(self, filename: str, ctx_id: int, value_name: str, raw) -> int:
        value_type, payload = encode_value(raw, name=value_name, put_blob=self.store.put_blob)
        return self.put_record(LogRecord(self.projid, self.tstamp, filename, ctx_id, value_name, payload, value_type))

    def log_encoded(self, filename: str, ctx_id: int, value_name: str, value: str, value_type: int) -> int:
        return self.put_record(LogRecord(self.projid, self.tstamp, filename, ctx_id, value_name, value, value_type))

    def _check_key(self, projid: str, tstamp: int) -> None:
        if (projid, tstamp) != (self.projid, self.tstamp):
            raise IntegrityError(f"row for ({projid}, {tstamp}) written to run ({self.projid}, {self.tstamp})")

    def __len__(self) -> int:
        return len(self.records) + len(self.loops)


class Store:
    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        self.records_dir = self.root / "records"
        self.objects_dir = self.root / "objects"
        self.records_dir.mkdir(parents=True, exist_ok=True)
        self.objects_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._db = sqlite3.connect(self.root / "index.db", check_same_thread=False, isolation_level=None)
        self._db.executescript(_SCHEMA)
        self.sync()

    def close(self) -> None:
        self._db.close()

    def __enter__(self) -> Store:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # blobs

    def _blob_path(self, h: str) -> Path:
        return self.objects_dir / h[:2] / h

    def put_blob(self, contents: bytes) -> str:
        h = digest(contents)
        path = self._blob_path(h)
        if not path.exists():
            path.parent.mkdir(exist_ok=True)
            tmp = path.with_suffix(f".tmp{os.getpid()}.{threading.get_ident()}")
            tmp.write_bytes(contents)
            os.replace(tmp, path)
        return h

    def has_blob(self, h: str) -> bool:
        return len(h) > 2 and self._blob_path(h).exists()

    def get_blob(self, h: str) -> bytes:
        try:
            return self._blob_path(h).read_bytes()
        except (FileNotFoundError, IndexError):
            raise NotFoundError(f"no blob with hash {h!r}") from None

    def blob_count(self) -> int:
        return sum(1 for p in self.objects_dir.glob("*/*") if ".tmp" not in p.name)

    # runs

    def open_run(self, projid: str, tstamp: int, *, extend: bool = False) -> RunWriter:
        return RunWriter(self, projid, tstamp, extend=extend)

    def write_run(self, writer: RunWriter, name: str | None = None) -> Path:
        """Persist a run file and index it. Returns the file path."""
        if name is None:
            name = run_file_name(writer.projid, writer.tstamp)
        path = self.records_dir / name
        if path.exists():
            raise IntegrityError(f"run file {name} already exists")
        lines = [json.dumps({"loop": asdict(it)}, sort_keys=True) for it in writer.loops]
        lines += [json.dumps({"log": asdict(rec)}, sort_keys=True) for rec in writer.records]
        tmp = path.with_suffix(".tmp")
        tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
        os.replace(tmp, path)
        with self._lock:
            self._index_file(path)
        return path

    def sync(self) -> None:
        """Index run files that are on disk but not yet in the index."""
        with self._lock:
            done = {r[0] for r in self._db.execute("SELECT name FROM run_files")}
            for path in sorted(self.records_dir.glob("*.jsonl")):
                if path.name not in done:
                    self._index_file(path)

    def _index_file(self, path: Path) -> None:
        loops, logs = read_run_file(path)
        db = self._db
        db.execute("BEGIN")
        try:
            db.executemany("INSERT INTO loops VALUES (?,?,?,?,?,?,?,?)", [astuple_loop(it) for it in loops])
            db.executemany("INSERT INTO logs VALUES (?,?,?,?,?,?,?,?)", [astuple_log(r) for r in logs])
            db.executemany(
                "INSERT INTO obj_store VALUES (?,?,?,?,?,?,?)",
                [(r.projid, r.tstamp, r.filename, r.ctx_id, r.value_name, r.value, r.seq) for r in logs if r.value_type == BLOB],
            )
            db.execute("INSERT INTO run_files VALUES (?)", (path.name,))
            db.execute("COMMIT")
        except Exception:
            db.execute("ROLLBACK")
            raise

    def rebuild(self) -> None:
        """Drop the record tables and re-index every run file."""
        with self._lock:
            for table in ("logs", "loops", "obj_store", "run_files"):
                self._db.execute(f"DELETE FROM {table}")
            self.sync()

    def run_files(self) -> list[Path]:
        return sorted(self.records_dir.glob("*.jsonl"))

    # reads

    def _select(self, table: str, columns: str, filters: dict, order: str) -> list[tuple]:
        clauses = [f"{k} = ?" for k, v in filters.items() if v is not None]
        params = [v for v in filters.values() if v is not None]
        sql = f"SELECT {columns} FROM {table}"
        if clauses:
            sql += " WHERE " + " AND ".join(clauses)
        with self._lock:
            return self._db.execute(sql + " ORDER BY " + order, params).fetchall()

    def scan(
        self,
        projid: str | None = None,
        tstamp: int | None = None,
        filename: str | None = None,
        value_name: str | None = None,
        ctx_id: int | None = None,
        where: Callable[[LogRecord], bool] | None = None,
    ) -> Iterator[LogRecord]:
        filters = dict(projid=projid, tstamp=tstamp, filename=filename, value_name=value_name, ctx_id=ctx_id)
        rows = self._select("logs", "*", filters, "tstamp, filename, seq, projid")
        for row in rows:
            rec = LogRecord(*row)
            if where is None or where(rec):
                yield rec

    def loops(self, projid: str | None = None, tstamp: int | None = None, filename: str | None = None) -> list[LoopIteration]:
        filters = dict(projid=projid, tstamp=tstamp, filename=filename)
        return [LoopIteration(*r) for r in self._select("loops", "*", filters, "tstamp, filename, ctx_id, projid")]

    def blobs(self, projid: str | None = None, tstamp: int | None = None, filename: str | None = None) -> list[BlobEntry]:
        filters = dict(projid=projid, tstamp=tstamp, filename=filename)
        rows = self._select("obj_store", "projid, tstamp, filename, ctx_id, value_name, hash", filters, "tstamp, filename, seq")
        return [BlobEntry(*r) for r in rows]

    def value_names(self, include_reserved: bool = False) -> list[str]:
        with self._lock:
            names = [r[0] for r in self._db.execute("SELECT DISTINCT value_name FROM logs ORDER BY value_name")]
        return [n for n in names if include_reserved or not is_reserved(n)]

    def args(self, projid: str, tstamp: int, filename: str) -> dict[str, ArgRecord]:
        values: dict[str, str] = {}
        sources: dict[str, str] = {}
        for rec in self.scan(projid=projid, tstamp=tstamp, filename=filename):
            if rec.value_name.startswith(ARG_PREFIX):
                values[rec.value_name[len(ARG_PREFIX):]] = rec.value
            elif rec.value_name.startswith(ARG_SOURCE_PREFIX):
                sources[rec.value_name[len(ARG_SOURCE_PREFIX):]] = rec.value
        return {
            name: ArgRecord(projid, tstamp, filename, name, value, sources.get(name) == "default")
            for name, value in values.items()
        }

    def max_tstamp(self) -> int:
        with self._lock:
            a = self._db.execute("SELECT MAX(tstamp) FROM logs").fetchone()[0] or 0
            b = self._db.execute("SELECT MAX(ts_end) FROM ts2vid").fetchone()[0] or 0
        return max(a, b)

    def record_count(self) -> int:
        with self._lock:
            return self._db.execute("SELECT COUNT(*) FROM logs").fetchone()[0]

    def execute(self, sql: str, params: Iterable = ()) -> list[tuple]:
        """Run a read-only SQL statement against the index."""
        with self._lock:
            return self._db.execute(sql, tuple(params)).fetchall()

    # ts2vid and build_deps

    def put_interval(self, projid: str, ts_start: int, ts_end: int, vid: str, root_target: str) -> None:
        with self._lock:
            self._db.execute(
                "INSERT OR REPLACE INTO ts2vid VALUES (?,?,?,?,?)", (projid, ts_start, ts_end, vid, root_target)
            )

    def interval_rows(self, projid: str | None = None) -> list[tuple]:
        return self._select("ts2vid", "*", dict(projid=projid), "projid, ts_start")

    def clear_intervals(self) -> None:
        with self._lock:
            self._db.execute("DELETE FROM ts2vid")
            self._db.execute("DELETE FROM build_deps")

    def put_build_deps(self, vid: str, rows: Iterable[tuple[str, list[str], list[str], bool]]) -> None:
        with self._lock:
            self._db.executemany(
                "INSERT OR REPLACE INTO build_deps VALUES (?,?,?,?,?)",
                [(vid, t, json.dumps(d), json.dumps(c), int(cached)) for t, d, c, cached in rows],
            )

    def build_deps(self, vid: str) -> list[tuple[str, list[str], list[str], bool]]:
        rows = self._select("build_deps", "target, deps, cmds, cached", dict(vid=vid), "target")
        return [(t, json.loads(d), json.loads(c), bool(k)) for t, d, c, k in rows]

    def audit(self) -> list[str]:
        """Return referential-integrity violations (empty when healthy)."""
        problems = []
        loops = {(it.projid, it.tstamp, it.filename, it.ctx_id): it for it in self.loops()}
        for key, it in loops.items():
            if it.parent_ctx_id and (*key[:3], it.parent_ctx_id) not in loops:
                problems.append(f"loop {key} has dangling parent {it.parent_ctx_id}")
        for rec in self.scan():
            if rec.ctx_id and (rec.projid, rec.tstamp, rec.filename, rec.ctx_id) not in loops:
                problems.append(f"record {rec.value_name!r} at {rec.tstamp} has dangling ctx {rec.ctx_id}")
            if rec.value_type == BLOB and not self.has_blob(rec.value):
                problems.append(f"record {rec.value_name!r} at {rec.tstamp} references missing blob {rec.value}")
        return problems


def run_file_name(projid: str, tstamp: int, suffix: str = "") -> str:
    """``<tstamp>.<projid>[.<suffix>].jsonl``; zero padding keeps names in tstamp order."""
    safe = re.sub(r"[^A-Za-z0-9_.-]", "_", projid)
    return f"{tstamp:012d}.{safe}" + (f".{suffix}" if suffix else "") + ".jsonl"


def astuple_loop(it: LoopIteration) -> tuple:
    return (it.projid, it.tstamp, it.filename, it.ctx_id, it.parent_ctx_id, it.loop_name, it.loop_iteration, it.iteration_value)


def astuple_log(r: LogRecord) -> tuple:
    return (r.projid, r.tstamp, r.filename, r.ctx_id, r.value_name, r.value, r.value_type, r.seq)


def read_run_file(path: str | os.PathLike) -> tuple[list[LoopIteration], list[LogRecord]]:
    """Parse a run file without touching the index."""
    loops, logs = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            row = json.loads(line)
            if "loop" in row:
                loops.append(LoopIteration(**row["loop"]))
            else:
                logs.append(LogRecord(**row["log"]))
    return loops, logs
