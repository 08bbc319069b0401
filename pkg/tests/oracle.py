"""Reference pivot computed by brute force over raw run files.

Nothing here touches the index: records are read straight from the JSONL run
files and joined with nested loops, so the result is independent of the SQL
path used by :func:`flor.query.dataframe`.
"""

from __future__ import annotations

import json
import random
from pathlib import Path

from flor.store import FLOAT, INT, TEXT, LogRecord, LoopIteration, Store

LEVEL_LOOPS = (("epoch", "document"), ("step", "page"), ("batch",))
FILES = ("a.py", "b.py", "c.py", "d.py", "e.py")
NAMES = ("acc", "loss", "recall", "text_src")


def random_store(rng: random.Random, store: Store, max_records: int = 200) -> list[tuple[str, int, int]]:
    """Fill ``store`` with random runs and return the intervals it declared."""
    projids = rng.sample(["p", "q"], rng.randint(1, 2))
    budget = rng.randint(1, max_records)
    intervals = []
    for projid in projids:
        tstamps = sorted(rng.sample(range(1, 12), rng.randint(1, 5)))
        files = rng.sample(FILES, rng.randint(1, 5))
        i = 0
        while i < len(tstamps):
            j = min(len(tstamps), i + rng.randint(1, 3))
            if rng.random() < 0.85:  # leave some runs outside any interval
                intervals.append((projid, tstamps[i], tstamps[j - 1]))
            i = j
        for t in tstamps:
            w = store.open_run(projid, t)
            for f in rng.sample(files, rng.randint(1, len(files))):
                if budget <= 0:
                    break
                budget -= _fill_file(rng, w, f, budget)
            if len(w):
                store.write_run(w)
    for projid, a, b in intervals:
        store.put_interval(projid, a, b, f"v{projid}{a}", "run")
    return intervals


def _fill_file(rng: random.Random, w, filename: str, budget: int) -> int:
    ctx = [0]
    used = [0]

    def emit(parent: int) -> None:
        for _ in range(rng.randint(0, 2)):
            if used[0] >= budget:
                return
            name = rng.choice(NAMES)
            kind = rng.choice((INT, FLOAT, TEXT))
            value = {INT: str(rng.randint(0, 3)), FLOAT: repr(rng.choice((0.5, 0.25, 1.5))), TEXT: rng.choice("xyz")}[kind]
            w.log_encoded(filename, parent, name, value, kind)
            used[0] += 1

    def grow(level: int, parent: int) -> None:
        if level >= len(LEVEL_LOOPS):
            return
        for _ in range(rng.randint(0, 2)):
            loop_name = rng.choice(LEVEL_LOOPS[level])
            for it in range(rng.randint(0, 3)):
                ctx[0] += 1
                me = ctx[0]
                # values may repeat across iterations, which collapses rows
                value = rng.choice(["0", "1", "2", str(it)])
                w.put_loop(LoopIteration(w.projid, w.tstamp, filename, me, parent, loop_name, it, value))
                emit(me)
                if rng.random() < 0.6:
                    grow(level + 1, me)

    emit(0)
    grow(0, 0)
    return used[0]


def read_raw(records_dir: Path) -> tuple[dict, list[LogRecord]]:
    loops, logs = {}, []
    for path in sorted(records_dir.glob("*.jsonl")):
        for line in path.read_text().splitlines():
            row = json.loads(line)
            if "loop" in row:
                it = LoopIteration(**row["loop"])
                loops[(it.projid, it.tstamp, it.filename, it.ctx_id)] = it
            else:
                logs.append(LogRecord(**row["log"]))
    return loops, logs


def _sort_key(cell):
    if cell is None:
        return (0, 0.0, "")
    try:
        return (1, float(cell), str(cell))
    except ValueError:
        return (2, 0.0, str(cell))


def reference(records_dir: Path, intervals: list[tuple[str, int, int]], names: list[str]):
    """Return (columns, rows) of the pivot of ``names``."""
    loops, logs = read_raw(records_dir)
    wanted = [r for r in logs if r.value_name in names]
    wanted.sort(key=lambda r: (r.tstamp, r.filename, r.seq))
    single = len({r.filename for r in wanted}) <= 1

    def scope(r):
        if single:
            return (r.projid, r.tstamp, r.filename)
        for projid, a, b in intervals:
            if projid == r.projid and a <= r.tstamp <= b:
                return (r.projid, "iv", a)
        return (r.projid, "t", r.tstamp)

    def path(r):
        out, ctx = [], r.ctx_id
        while ctx:
            it = loops[(r.projid, r.tstamp, r.filename, ctx)]
            out.append((it.loop_name, it.iteration_value))
            ctx = it.parent_ctx_id
        return tuple(reversed(out))

    # loop columns: outermost first, then the first name that needs them
    rank = {}
    for i, n in enumerate(names):
        for r in wanted:
            if r.value_name == n:
                for depth, (loop, _) in enumerate(path(r)):
                    rank[loop] = min(rank.get(loop, (depth, i)), (depth, i))
    loop_cols = sorted(rank, key=lambda k: (*rank[k], k))

    relations = []
    for n in names:
        rel = {}
        for r in wanted:
            if r.value_name == n:
                p = path(r)
                rel[(scope(r), p)] = {"scope": scope(r), "dims": dict(p), "values": {n: r.value},
                                      "tstamp": r.tstamp, "filename": r.filename}
        relations.append(list(rel.values()))

    rows = relations[0] if relations else []
    for right in relations[1:]:
        out, hit_right = [], set()
        for left in rows:
            hit = False
            for j, r in enumerate(right):
                if r["scope"] != left["scope"]:
                    continue
                if any(left["dims"][k] != r["dims"][k] for k in left["dims"].keys() & r["dims"].keys()):
                    continue
                hit = True
                hit_right.add(j)
                out.append({"scope": left["scope"], "dims": {**left["dims"], **r["dims"]},
                            "values": {**left["values"], **r["values"]},
                            "tstamp": max(left["tstamp"], r["tstamp"]), "filename": left["filename"]})
            if not hit:
                out.append(left)
        out += [r for j, r in enumerate(right) if j not in hit_right]
        rows = out

    columns = ["projid", "tstamp"] + (["filename"] if single else []) + loop_cols + list(names)
    table = []
    for r in rows:
        head = [r["scope"][0], str(r["tstamp"])] + ([r["filename"]] if single else [])
        table.append(tuple(head + [r["dims"].get(c) for c in loop_cols] + [r["values"].get(n) for n in names]))
    return columns, table


def canonical(rows):
    return sorted(rows, key=lambda row: [_sort_key(c) for c in row])
