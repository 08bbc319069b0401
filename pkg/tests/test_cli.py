from __future__ import annotations

import csv
import io
import json

import pytest

from conftest import copy_demo, flor


def rows(text: str) -> list[list[str]]:
    return list(csv.reader(io.StringIO(text)))


def test_init_and_empty_versions(tmp_path):
    (tmp_path / "Makefile").write_text("all:\n\techo hi\n")
    out = flor("init", "--clock", "logical", cwd=tmp_path)
    assert "initialized" in out.stdout
    cfg = json.loads((tmp_path / ".flor" / "config.json").read_text())
    assert cfg == {"projid": tmp_path.name, "makefile_path": "Makefile", "clock_mode": "logical"}
    v = flor("versions", cwd=tmp_path)
    assert v.stdout == ""


def test_init_rejects_bad_makefile(tmp_path):
    (tmp_path / "Makefile").write_text("include x.mk\n")
    proc = flor("init", cwd=tmp_path, check=False)
    assert proc.returncode == 1
    assert proc.stderr.startswith("error: line 1:")


def test_outside_project(tmp_path):
    proc = flor("versions", cwd=tmp_path, check=False)
    assert proc.returncode == 1
    assert proc.stderr.startswith("error: ") and "Traceback" not in proc.stderr


def test_usage_error(demo_dir):
    proc = flor("run", "-k", "novalue", cwd=demo_dir, check=False)
    assert proc.returncode == 2
    assert flor("query", cwd=demo_dir, check=False).returncode == 2
    assert flor("frobnicate", cwd=demo_dir, check=False).returncode == 2


def test_unknown_name(demo_dir):
    flor("run", "featurize", "-q", cwd=demo_dir)
    proc = flor("query", "nope", cwd=demo_dir, check=False)
    assert proc.returncode == 1
    assert proc.stderr.startswith("error: unknown name(s) nope; known names:")


def test_featurize_csv_header(demo_dir):
    flor("run", "featurize", "-q", cwd=demo_dir)
    out = flor("query", "text_src", "page_text", "headings", "page_numbers", "--csv", cwd=demo_dir).stdout
    assert rows(out)[0] == "projid,tstamp,filename,document,page,text_src,page_text,headings,page_numbers".split(",")


def test_csv_byte_stable(tmp_path):
    outs = []
    for name in ("one", "two"):
        root = copy_demo(tmp_path / name)
        flor("init", "--clock", "logical", "--projid", "pdfs", cwd=root)
        flor("run", "featurize", "-q", cwd=root)
        outs.append(flor("query", "text_src", "page_text", "--csv", cwd=root).stdout)
    assert outs[0] == outs[1]


def test_feedback_round_trip(demo_dir):
    flor("run", "process_pdfs", "-q", cwd=demo_dir)
    flor("feedback", "page_color", "--document", "a.pdf", "--page", "1", "green", cwd=demo_dir)
    out = flor("query", "first_page", "page_color", "--csv", cwd=demo_dir).stdout
    table = rows(out)
    assert table[0] == ["projid", "tstamp", "document", "page", "first_page", "page_color"]
    assert ["pdfs", "2", "a.pdf", "1", "0", "green"] in table
    versions = flor("versions", cwd=demo_dir).stdout.splitlines()
    assert len(versions) == 1 and versions[0].split("\t")[1:3] == ["1", "2"]


@pytest.mark.parametrize("args", [
    ["feedback", "page_color", "--document", "a.pdf"],
    ["feedback", "page_color", "--document", "a.pdf", "--page", "green"],
    ["feedback", "page_color", "document", "a.pdf", "green"],
])
def test_feedback_usage(demo_dir, args):
    assert flor(*args, cwd=demo_dir, check=False).returncode == 2


def test_run_override(demo_dir):
    flor("run", "train", "-q", "-k", "epochs=2", cwd=demo_dir)
    out = flor("query", "acc", "--csv", cwd=demo_dir).stdout
    assert len(rows(out)) == 3


def test_run_failure_exit(demo_dir):
    (demo_dir / "featurize.py").write_text("raise SystemExit(4)\n")
    proc = flor("run", "featurize", "-q", cwd=demo_dir, check=False)
    assert proc.returncode == 1
    assert "status=failed:featurize" in proc.stdout


def test_checkpoint_fallback_and_best(demo_dir):
    proc = flor("checkpoint", "recall", "--fallback", "fallback_model.bin", "--out", "m.bin", cwd=demo_dir)
    assert proc.stdout.startswith("fallback")
    assert (demo_dir / "m.bin").read_bytes() == (demo_dir / "fallback_model.bin").read_bytes()
    flor("run", "train", "-q", cwd=demo_dir)
    proc = flor("checkpoint", "recall", "--out", "m.bin", cwd=demo_dir)
    assert proc.stdout.startswith("checkpoint")
    assert json.loads((demo_dir / "m.bin").read_text())["epoch"] == 3


def test_checkpoint_without_fallback(demo_dir):
    proc = flor("checkpoint", "recall", "--out", "m.bin", cwd=demo_dir, check=False)
    assert proc.returncode == 1 and proc.stderr.startswith("error: no checkpoint")


def test_replay_dry_run_and_execute(demo_dir):
    flor("run", "train", "-q", cwd=demo_dir)
    dry = flor("replay", "--names", "recall", "--dry-run", cwd=demo_dir)
    assert "work (0):" in dry.stdout
    bad = flor("replay", "--names", ",", cwd=demo_dir, check=False)
    assert bad.returncode == 2


def test_reindex(demo_dir):
    flor("run", "featurize", "-q", cwd=demo_dir)
    before = flor("query", "page_text", "--csv", cwd=demo_dir).stdout
    (demo_dir / ".flor" / "index.db").unlink()
    flor("reindex", cwd=demo_dir)
    assert flor("query", "page_text", "--csv", cwd=demo_dir).stdout == before
    assert flor("versions", cwd=demo_dir).stdout.count("\n") == 1


def test_projid_override(demo_dir):
    flor("run", "process_pdfs", "-q", cwd=demo_dir, env={"FLOR_PROJID": "other"})
    out = flor("query", "first_page", "--csv", cwd=demo_dir).stdout
    assert rows(out)[1][0] == "other"


def test_demo_command(tmp_path):
    flor("demo", "d", cwd=tmp_path)
    assert (tmp_path / "d" / "Makefile").exists()
    assert flor("demo", "d", cwd=tmp_path, check=False).returncode == 1
