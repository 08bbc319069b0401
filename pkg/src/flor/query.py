"""Pivoted reads over the log store.

``dataframe(store, names)`` returns one column per requested name plus
dimension columns ``projid, tstamp[, filename]`` and one column per loop.
Rows are built by a left fold of full outer joins in argument order; two
partial rows join when they share a scope and agree on every loop they both
have, so a value logged in an outer loop is broadcast to the rows of its
inner loops.

The scope is ``(projid, tstamp, filename)`` when all requested names come
from a single file, and ``(projid, version interval)`` otherwise. In the
latter case the reported tstamp is the largest contributing one and the
filename column is dropped.
"""

from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import DataError, FlorError, NotFoundError
from .store import Store
from .vcs import intervals

BASE_DIMS = ("projid", "tstamp", "filename")


@dataclass
class PivotTable:
    dim_columns: list[str]
    value_columns: list[str]
    rows: list[tuple] = field(default_factory=list)

    @property
    def columns(self) -> list[str]:
        return self.dim_columns + self.value_columns

    def __len__(self) -> int:
        return len(self.rows)

    def records(self) -> list[dict]:
        return [dict(zip(self.columns, row)) for row in self.rows]

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow(["" if c is None else c for c in row])
        return buf.getvalue()

    def to_text(self) -> str:
        cells = [self.columns] + [["" if c is None else str(c) for c in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"

    def to_pandas(self):
        import pandas as pd

        return pd.DataFrame(self.rows, columns=self.columns)


def cell_sort_key(cell) -> tuple:
    """Nulls first, then numbers in numeric order, then text."""
    if cell is None:
        return (0, 0.0, "")
    try:
        return (1, float(cell), str(cell))
    except (TypeError, ValueError):
        return (2, 0.0, str(cell))


@dataclass
class _Fact:
    projid: str
    tstamp: int
    filename: str
    seq: int
    name: str
    value: str
    path: tuple[tuple[str, str], ...]


_FACTS_SQL = """
WITH RECURSIVE chain(projid, tstamp, filename, leaf, parent, loop_name, value, depth) AS (
    SELECT projid, tstamp, filename, ctx_id, parent_ctx_id, loop_name, iteration_value, 0
    FROM loops
    WHERE (projid, tstamp, filename, ctx_id) IN (
        SELECT projid, tstamp, filename, ctx_id FROM logs WHERE value_name IN ({marks}))
    UNION ALL
    SELECT c.projid, c.tstamp, c.filename, c.leaf, p.parent_ctx_id, p.loop_name, p.iteration_value, c.depth + 1
    FROM chain c JOIN loops p
      ON p.projid = c.projid AND p.tstamp = c.tstamp AND p.filename = c.filename AND p.ctx_id = c.parent
)
SELECT l.projid, l.tstamp, l.filename, l.seq, l.value_name, l.value, c.loop_name, c.value
FROM logs l LEFT JOIN chain c
  ON c.projid = l.projid AND c.tstamp = l.tstamp AND c.filename = l.filename AND c.leaf = l.ctx_id
WHERE l.value_name IN ({marks})
ORDER BY l.tstamp, l.filename, l.seq, l.projid, c.depth DESC
"""


def _facts(store: Store, names: Sequence[str]) -> list[_Fact]:
    marks = ",".join("?" * len(names))
    rows = store.execute(_FACTS_SQL.format(marks=marks), [*names, *names])
    facts: list[_Fact] = []
    last_key = None
    for projid, tstamp, filename, seq, name, value, loop_name, loop_value in rows:
        key = (projid, tstamp, filename, seq)
        if key != last_key:
            facts.append(_Fact(projid, tstamp, filename, seq, name, value, ()))
            last_key = key
        if loop_name is not None:
            facts[-1].path += ((loop_name, loop_value),)
    return facts


def _check_names(store: Store, names: Sequence[str]) -> None:
    if len(set(names)) != len(names):
        raise FlorError("requested names must be distinct")
    known = set(store.value_names(include_reserved=True))
    if not known:
        return
    unknown = [n for n in names if n not in known]
    if unknown:
        listing = ", ".join(store.value_names()) or "(none)"
        raise NotFoundError(f"unknown name(s) {', '.join(unknown)}; known names: {listing}")


def dims_of(store: Store, name: str) -> dict[str, list[str]]:
    """Loop dimensions (outer to inner) of ``name`` for each file that logged it."""
    _check_names(store, [name])
    facts = _facts(store, [name])
    if not facts:
        raise NotFoundError(f"unknown name {name!r}")
    out: dict[str, list[str]] = {}
    for f in facts:
        path = [loop for loop, _ in f.path]
        if len(path) > len(out.get(f.filename, [])) or f.filename not in out:
            out[f.filename] = path
    return dict(sorted(out.items()))


def loop_columns(paths_by_name: Iterable[Iterable[Sequence[str]]]) -> list[str]:
    """Order loop names by shallowest depth, then first requesting name, then name."""
    best: dict[str, tuple[int, int]] = {}
    for i, paths in enumerate(paths_by_name):
        for path in paths:
            for depth, loop in enumerate(path):
                best[loop] = min(best.get(loop, (depth, i)), (depth, i))
    return sorted(best, key=lambda k: (*best[k], k))


class _IntervalIndex:
    def __init__(self, store: Store) -> None:
        self._by_proj = defaultdict(list)
        for iv in intervals(store):
            self._by_proj[iv.projid].append(iv)

    def key(self, projid: str, t: int) -> tuple:
        for iv in self._by_proj.get(projid, ()):
            if iv.contains(t):
                return ("interval", iv.ts_start)
        return ("tstamp", t)


@dataclass
class _Partial:
    scope: tuple
    dims: dict[str, str]
    values: dict[str, str]
    tstamp: int
    filename: str


def dataframe(store: Store, names: Sequence[str]) -> PivotTable:
    names = list(names)
    _check_names(store, names)
    facts = _facts(store, names) if names else []
    filenames = {f.filename for f in facts}
    single = len(filenames) <= 1
    ivs = None if single else _IntervalIndex(store)

    def scope_of(f: _Fact) -> tuple:
        if single:
            return (f.projid, f.tstamp, f.filename)
        return (f.projid, ivs.key(f.projid, f.tstamp))

    # per-name relation; facts arrive in (tstamp, filename, seq) order so later ones win
    relations: dict[str, dict[tuple, _Partial]] = {n: {} for n in names}
    paths: dict[str, set[tuple[str, ...]]] = {n: set() for n in names}
    for f in facts:
        scope = scope_of(f)
        relations[f.name][(scope, f.path)] = _Partial(scope, dict(f.path), {f.name: f.value}, f.tstamp, f.filename)
        paths[f.name].add(tuple(loop for loop, _ in f.path))

    loops = loop_columns(paths[n] for n in names)
    dim_columns = ["projid", "tstamp"] + (["filename"] if single else []) + loops

    rows: list[_Partial] = []
    for i, name in enumerate(names):
        right = list(relations[name].values())
        rows = right if i == 0 else _outer_join(rows, right)

    out = []
    for r in rows:
        head = [r.scope[0], str(r.tstamp)] + ([r.filename] if single else [])
        out.append(tuple(head + [r.dims.get(c) for c in loops] + [r.values.get(n) for n in names]))
    width = len(dim_columns)
    out.sort(key=lambda row: [cell_sort_key(c) for c in row[:width]])
    return PivotTable(dim_columns, names, out)


def _outer_join(left: list[_Partial], right: list[_Partial]) -> list[_Partial]:
    groups: dict[tuple, list[int]] = defaultdict(list)
    for j, r in enumerate(right):
        groups[(r.scope, frozenset(r.dims))].append(j)
    by_scope: dict[tuple, list[frozenset]] = defaultdict(list)
    for scope, keys in groups:
        by_scope[scope].append(keys)
    indexes: dict[tuple, dict[tuple, list[int]]] = {}

    def probe(scope, keys: frozenset, common: tuple[str, ...]) -> dict[tuple, list[int]]:
        ik = (scope, keys, common)
        if ik not in indexes:
            idx = defaultdict(list)
            for j in groups[(scope, keys)]:
                idx[tuple(right[j].dims[c] for c in common)].append(j)
            indexes[ik] = idx
        return indexes[ik]

    matched = [False] * len(right)
    out: list[_Partial] = []
    for row in left:
        hit = False
        for keys in by_scope.get(row.scope, ()):
            common = tuple(sorted(keys & row.dims.keys()))
            for j in probe(row.scope, keys, common).get(tuple(row.dims[c] for c in common), ()):
                r = right[j]
                matched[j] = hit = True
                out.append(_Partial(
                    row.scope,
                    {**row.dims, **r.dims},
                    {**row.values, **r.values},
                    max(row.tstamp, r.tstamp),
                    row.filename,
                ))
        if not hit:
            out.append(row)
    out.extend(r for j, r in enumerate(right) if not matched[j])
    return out


def best_checkpoint(store: Store, metric: str, maximize: bool = True, model: str = "model") -> str | None:
    """Blob hash of the ``model`` checkpoint whose row has the best ``metric``.

    Ties go to the later tstamp, then the later iteration. Returns ``None``
    when no row has both values, so the caller can fall back.
    """
    try:
        table = dataframe(store, [metric, model])
    except NotFoundError:
        return None
    width = len(table.dim_columns)
    best_key, best_hash = None, None
    for row in table.rows:
        score, blob = row[width], row[width + 1]
        if score is None or blob is None:
            continue
        try:
            value = float(score)
        except ValueError:
            raise DataError(f"{metric} value {score!r} is not a number in row {row[:width]}") from None
        key = (value if maximize else -value, int(row[1]), [cell_sort_key(c) for c in row[2:width]])
        if best_key is None or key > best_key:
            best_key, best_hash = key, blob
    return best_hash
