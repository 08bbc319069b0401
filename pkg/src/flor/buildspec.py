"""Parser and scheduler for a restricted Makefile dialect.

Supported: ``target: deps`` rules, tab-indented recipes, ``$(VAR)``/``${VAR}``
expansion with ``=``, ``:=``, ``?=`` and ``+=`` assignments, ``$@ $< $^`` in
recipes, the ``@`` echo-suppression prefix, ``#`` comments, backslash line
continuations and ``.PHONY``. A ``# flor:cached`` comment on a rule line marks
the target as participating in checkpoint memoization.

Everything else (pattern rules, ``include``, conditionals, functions, ...)
raises :class:`UnsupportedConstructError` instead of being misread.
"""

from __future__ import annotations

import os
import re
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import CycleError, MissingSourceError, NotFoundError, ParseError, UnsupportedConstructError

CACHED_DIRECTIVE = "flor:cached"

_DIRECTIVES = {
    "include", "-include", "sinclude", "ifeq", "ifneq", "ifdef", "ifndef", "else", "endif",
    "define", "endef", "export", "unexport", "override", "vpath", "private", "undefine", "load",
}
_ASSIGN = re.compile(r"^([A-Za-z_][A-Za-z0-9_.-]*)\s*(\?=|::=|:=|\+=|=)\s*(.*)$")
_INTERPRETERS = {"python", "python3", "Rscript", "bash", "sh", "node", "ruby", "perl", "julia"}


@dataclass(frozen=True)
class BuildTarget:
    vid: str
    target: str
    deps: tuple[str, ...]
    cmds: tuple[str, ...]
    cached: bool = False
    silent: tuple[bool, ...] = ()
    lineno: int = field(default=0, compare=False)


@dataclass
class BuildGraph:
    vid: str = ""
    targets: dict[str, BuildTarget] = field(default_factory=dict)
    default_target: str | None = None
    variables: dict[str, str] = field(default_factory=dict)
    flavors: dict[str, str] = field(default_factory=dict)
    phony: frozenset[str] = frozenset()

    def __contains__(self, name: str) -> bool:
        return name in self.targets

    def __getitem__(self, name: str) -> BuildTarget:
        try:
            return self.targets[name]
        except KeyError:
            raise NotFoundError(f"unknown target {name!r}") from None

    def rows(self) -> list[tuple[str, list[str], list[str], bool]]:
        """``build_deps`` rows: (target, deps, cmds, cached)."""
        return [(t.target, list(t.deps), list(t.cmds), t.cached) for t in self.targets.values()]

    def expand_recipe(self, target: str, cmd: str) -> str:
        t = self[target]
        auto = {"@": t.target, "<": t.deps[0] if t.deps else "", "^": " ".join(dict.fromkeys(t.deps))}
        return _expand(cmd, self.variables, self.flavors, auto=auto)

    def recipes(self, target: str) -> list[str]:
        return [self.expand_recipe(target, c) for c in self[target].cmds]

    def producer_of(self, step_file: str) -> str | None:
        """Name of the first target whose recipe launches ``step_file``."""
        for name in self.targets:
            if any(script_of(c) == step_file for c in self.recipes(name)):
                return name
        return None


def _expand(text: str, variables: Mapping[str, str], flavors: Mapping[str, str], *, auto=None, lineno=None, _depth=0) -> str:
    if _depth > 50:
        raise ParseError("recursive variable references itself", lineno)
    out = []
    i = 0
    while i < len(text):
        c = text[i]
        if c != "$":
            out.append(c)
            i += 1
            continue
        if i + 1 >= len(text):
            out.append("$")
            break
        nxt = text[i + 1]
        if nxt == "$":
            out.append("$")
            i += 2
            continue
        if nxt in "({":
            close = ")" if nxt == "(" else "}"
            end = text.find(close, i + 2)
            if end < 0:
                raise ParseError("unterminated variable reference", lineno)
            name = text[i + 2:end]
            i = end + 1
        else:
            name = nxt
            i += 2
        if auto is not None and name in auto:
            out.append(auto[name])
            continue
        if not name or any(ch in name for ch in " \t,:$%") or name in "@<^?*+|":
            raise UnsupportedConstructError(f"unsupported reference $({name})", lineno)
        value = variables.get(name, "")
        if flavors.get(name) == "recursive":
            value = _expand(value, variables, flavors, auto=auto, lineno=lineno, _depth=_depth + 1)
        out.append(value)
    return "".join(out)


def _strip_comment(line: str) -> tuple[str, str]:
    idx = line.find("#")
    while idx > 0 and line[idx - 1] == "\\":
        idx = line.find("#", idx + 1)
    if idx < 0:
        return line, ""
    return line[:idx], line[idx + 1:]


def _logical_lines(text: str):
    """Yield (lineno, line) with backslash continuations joined."""
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        start = i
        line = lines[i]
        if line.startswith("\t"):
            parts = [line]
            while parts[-1].endswith("\\") and i + 1 < len(lines):
                i += 1
                parts.append(lines[i][1:] if lines[i].startswith("\t") else lines[i])
            line = "\n".join(parts)
        else:
            while line.endswith("\\") and i + 1 < len(lines):
                i += 1
                line = line[:-1].rstrip() + " " + lines[i].strip()
        yield start + 1, line
        i += 1


def parse_makefile(text: str, vid: str = "") -> BuildGraph:
    variables: dict[str, str] = {}
    flavors: dict[str, str] = {}
    rules: dict[str, dict] = {}
    phony: set[str] = set()
    default = None
    current = None
    block = 0

    for lineno, line in _logical_lines(text):
        if line.startswith("\t"):
            if current is None:
                if not line.strip():
                    continue
                raise ParseError("recipe line without a preceding rule", lineno)
            cmd = line[1:]
            silent = False
            stripped = cmd.lstrip(" ")
            while stripped[:1] in ("@", "-", "+") and stripped:
                if stripped[0] != "@":
                    raise UnsupportedConstructError(f"recipe prefix {stripped[0]!r} is not supported", lineno)
                silent = True
                stripped = stripped[1:].lstrip(" ")
            if not stripped.strip():
                continue
            rule = rules[current]
            if rule["cmds"] and rule["block"] != block:
                raise ParseError(f"target {current!r} has two recipes", lineno)
            rule["block"] = block
            rule["cmds"].append(stripped)
            rule["silent"].append(silent)
            continue

        body, comment = _strip_comment(line)
        if not body.strip():
            continue
        if line[:1] == " " and current is not None:
            raise ParseError("recipe lines must start with a tab", lineno)
        current = None
        first = body.split(None, 1)[0]
        if first in _DIRECTIVES:
            raise UnsupportedConstructError(f"directive {first!r} is not supported", lineno)

        m = _ASSIGN.match(body.strip())
        if m and ":" not in body.split(m.group(2), 1)[0]:
            name, op, value = m.group(1), m.group(2), m.group(3).rstrip()
            if op == "=":
                variables[name], flavors[name] = value, "recursive"
            elif op in (":=", "::="):
                variables[name], flavors[name] = _expand(value, variables, flavors, lineno=lineno), "simple"
            elif op == "?=":
                if name not in variables:
                    variables[name], flavors[name] = value, "recursive"
            else:
                if flavors.get(name) == "simple":
                    value = _expand(value, variables, flavors, lineno=lineno)
                old = variables.get(name)
                variables[name] = f"{old} {value}" if old else value
                flavors.setdefault(name, "recursive")
            continue

        if ":" not in body:
            raise ParseError(f"missing separator in {body.strip()!r}", lineno)
        head, _, tail = body.partition(":")
        if tail.startswith(":"):
            raise UnsupportedConstructError("double-colon rules are not supported", lineno)
        if ";" in tail:
            raise UnsupportedConstructError("inline recipes (';') are not supported", lineno)
        if "=" in tail:
            raise UnsupportedConstructError("target-specific variables are not supported", lineno)
        names = _expand(head, variables, flavors, lineno=lineno).split()
        if len(names) != 1:
            raise UnsupportedConstructError("rules must name exactly one target", lineno)
        name = names[0]
        deps = _expand(tail, variables, flavors, lineno=lineno).split()
        if "%" in name or any("%" in d for d in deps):
            raise UnsupportedConstructError("pattern rules are not supported", lineno)
        if "|" in deps:
            raise UnsupportedConstructError("order-only prerequisites are not supported", lineno)
        if name.startswith("."):
            if name != ".PHONY":
                raise UnsupportedConstructError(f"special target {name} is not supported", lineno)
            phony.update(deps)
            continue
        cached = CACHED_DIRECTIVE in comment
        if name in rules:
            rule = rules[name]
            rule["deps"] += [d for d in deps if d not in rule["deps"]]
            rule["cached"] = rule["cached"] or cached
        else:
            rules[name] = dict(deps=deps, cmds=[], silent=[], cached=cached, lineno=lineno, block=lineno)
            if default is None:
                default = name
        current = name
        block = lineno

    targets = {
        name: BuildTarget(vid, name, tuple(r["deps"]), tuple(r["cmds"]), r["cached"], tuple(r["silent"]), r["lineno"])
        for name, r in rules.items()
    }
    graph = BuildGraph(vid, targets, default, variables, flavors, frozenset(phony))
    check_acyclic(graph)
    # surface unsupported references in recipes now rather than at run time
    for t in targets.values():
        for cmd in t.cmds:
            try:
                graph.expand_recipe(t.target, cmd)
            except ParseError as exc:
                if exc.lineno is not None:
                    raise
                raise type(exc)(exc.message, t.lineno) from None
    return graph


def check_acyclic(graph: BuildGraph) -> None:
    state: dict[str, int] = {}
    stack: list[str] = []

    def visit(name: str) -> None:
        state[name] = 1
        stack.append(name)
        for dep in graph.targets[name].deps:
            if dep not in graph.targets:
                continue
            if state.get(dep) == 1:
                raise CycleError(stack[stack.index(dep):] + [dep])
            if dep not in state:
                visit(dep)
        stack.pop()
        state[name] = 2

    for name in graph.targets:
        if name not in state:
            visit(name)


def format_makefile(graph: BuildGraph) -> str:
    """Render ``graph`` back into the supported dialect."""
    lines = []
    for name, value in graph.variables.items():
        op = ":=" if graph.flavors.get(name) == "simple" else "="
        lines.append(f"{name} {op} {value}")
    if graph.phony:
        lines.append(".PHONY: " + " ".join(sorted(graph.phony)))
    for t in graph.targets.values():
        deps = " ".join(d.replace("$", "$$") for d in t.deps)
        rule = f"{t.target}: {deps}".rstrip()
        if t.cached:
            rule += f"  # {CACHED_DIRECTIVE}"
        lines.append("")
        lines.append(rule)
        silent = t.silent or (False,) * len(t.cmds)
        for cmd, quiet in zip(t.cmds, silent):
            lines.append("\t" + ("@" if quiet else "") + cmd)
    return "\n".join(lines).lstrip("\n") + "\n"


def topo_order(graph: BuildGraph, goal: str) -> list[str]:
    """Targets needed for ``goal``, dependencies first, deps in declaration order."""
    graph[goal]
    seen: set[str] = set()
    order: list[str] = []

    def visit(name: str) -> None:
        seen.add(name)
        for dep in graph.targets[name].deps:
            if dep in graph.targets and dep not in seen:
                visit(dep)
        order.append(name)

    visit(goal)
    return order


def stale_targets(graph: BuildGraph, mtimes: Mapping[str, float | None], goal: str) -> set[str]:
    """Targets that Make would rebuild for ``goal``.

    ``mtimes`` maps paths to modification times; absent paths (or ``None``)
    do not exist. A target's marker file is the file named after it.
    """
    stale: set[str] = set()
    for name in topo_order(graph, goal):
        own = mtimes.get(name)
        dirty = own is None or name in graph.phony
        for dep in graph.targets[name].deps:
            dep_time = mtimes.get(dep)
            if dep in graph.targets:
                if dep in stale:
                    dirty = True
                    continue
            elif dep_time is None:
                raise MissingSourceError(f"no rule to make {dep!r}, needed by {name!r}")
            if own is not None and dep_time is not None and dep_time > own:
                dirty = True
        if dirty:
            stale.add(name)
    return stale


def collect_mtimes(graph: BuildGraph, root: str | os.PathLike, goal: str) -> dict[str, int | None]:
    """Modification times (ns) of every path relevant to ``goal`` under ``root``."""
    root = Path(root)
    paths = set()
    for name in topo_order(graph, goal):
        paths.add(name)
        paths.update(graph.targets[name].deps)
    out: dict[str, int | None] = {}
    for p in paths:
        try:
            out[p] = (root / p).stat().st_mtime_ns
        except FileNotFoundError:
            out[p] = None
    return out


def script_of(cmd: str) -> str | None:
    """The program file a recipe line launches, e.g. ``train.py`` for ``python train.py``."""
    try:
        tokens = shlex.split(cmd, comments=False)
    except ValueError:
        return None
    while tokens and re.match(r"^[A-Za-z_][A-Za-z0-9_]*=", tokens[0]):
        tokens = tokens[1:]
    if not tokens:
        return None
    if os.path.basename(tokens[0]) in _INTERPRETERS:
        args = tokens[1:]
        while args and args[0].startswith("-"):
            if args[0] in ("-m", "-c"):
                return None
            args = args[1:]
        return args[0] if args else None
    if tokens[0].startswith("./"):
        return tokens[0][2:]
    return None
