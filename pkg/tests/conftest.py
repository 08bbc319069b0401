from __future__ import annotations

import os
import shutil
import subprocess
import sys
import time
from importlib import resources
from pathlib import Path

import pytest

from flor.project import Project
from flor.runner import run

DEMO = Path(str(resources.files("flor") / "demo"))


def flor(*args: str, cwd: Path, check: bool = True, env: dict | None = None) -> subprocess.CompletedProcess:
    """Run the CLI in a fresh interpreter, the way a user would."""
    proc = subprocess.run(
        [sys.executable, "-m", "flor", *args],
        cwd=cwd,
        capture_output=True,
        text=True,
        env={**os.environ, **(env or {})},
    )
    if check and proc.returncode != 0:
        raise AssertionError(f"flor {' '.join(args)} exited {proc.returncode}\n{proc.stdout}\n{proc.stderr}")
    return proc


def copy_demo(dest: Path) -> Path:
    shutil.copytree(DEMO, dest, ignore=shutil.ignore_patterns("__pycache__"))
    return dest


@pytest.fixture
def demo_dir(tmp_path: Path) -> Path:
    root = copy_demo(tmp_path / "pdfs")
    Project.init(root, "pdfs", clock_mode="logical").close()
    return root


@pytest.fixture
def project(tmp_path: Path):
    root = tmp_path / "proj"
    root.mkdir()
    (root / "Makefile").write_text("all:\n\techo hi\n")
    p = Project.init(root, "proj", clock_mode="logical")
    yield p
    p.close()


@pytest.fixture(autouse=True)
def _no_projid_override(monkeypatch):
    monkeypatch.delenv("FLOR_PROJID", raising=False)
    monkeypatch.delenv("FLOR_REPLAY", raising=False)


def edit(path: Path, text: str) -> None:
    """Write ``path`` so its mtime is strictly newer than every file beside it.

    Filesystem timestamps are coarse; without this an edit made right after a
    run can look as old as the marker files the run touched.
    """
    newest = max(p.stat().st_mtime_ns for p in path.parent.iterdir() if p.is_file())
    while True:
        path.write_text(text)
        if path.stat().st_mtime_ns > newest:
            return
        time.sleep(0.005)


SERVE_DIR = Path(__file__).parent / "fixtures" / "serve"


@pytest.fixture
def serve_dir(tmp_path: Path, monkeypatch) -> Path:
    """The four-target pipeline with a ``flask`` stand-in on PATH."""
    root = tmp_path / "serve"
    shutil.copytree(SERVE_DIR, root)
    monkeypatch.setenv("PATH", f"{root / 'bin'}{os.pathsep}{os.environ['PATH']}")
    Project.init(root, "serve", clock_mode="logical").close()
    return root


RECALL_LINE = '    log("recall", recall)\n'


def three_versions(root) -> list[int]:
    """v1 and v2 train without logging recall; v3 adds the statement.

    ``train.py`` is made a dependency of ``train`` so each edit re-runs it.
    """
    mk = root / "Makefile"
    mk.write_text(mk.read_text().replace("train: prep", "train: prep train.py"))
    train = root / "train.py"
    text = train.read_text()
    edit(train, text.replace(RECALL_LINE, ""))
    tstamps = []
    with Project(root) as p:
        tstamps.append(run(p, "train", quiet=True).tstamp)
        edit(train, train.read_text().replace('arg("seed", 0)', 'arg("seed", 1)'))
        tstamps.append(run(p, "train", quiet=True).tstamp)
        edit(train, train.read_text() + RECALL_LINE)
        tstamps.append(run(p, "train", quiet=True).tstamp)
    return tstamps


# one pass/fail line per acceptance criterion, printed after the run
CRITERIA: dict[int, tuple[str, bool]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (rep.when != "call" and not rep.failed):
        return
    n, title = marker.args
    ok = CRITERIA.get(n, (title, True))[1] and rep.passed
    CRITERIA[n] = (title, ok)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}")
