"""Command line interface: ``flor init|run|query|replay|versions|feedback|checkpoint``."""

from __future__ import annotations

import shutil
import sys
from importlib import resources
from pathlib import Path

import click

from . import query as q
from . import replay as rp
from .errors import FlorError
from .project import CLOCK_MODES, Project
from .runner import run as run_goal
from .store import LoopIteration


def _project() -> Project:
    return Project.locate()


def _pairs(items: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise click.BadParameter(f"expected k=v, got {item!r}", param_hint="--kwargs")
        out[key] = value
    return out


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except FlorError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(1)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(1)


@click.group(cls=_Group)
@click.version_option(package_name="artifact", prog_name="flor")
def main() -> None:
    """Capture, query and backfill the metadata of a Make-driven pipeline."""


@main.command()
@click.option("--projid", help="Project id (defaults to the directory name).")
@click.option("--clock", type=click.Choice(CLOCK_MODES), default="wall", show_default=True)
@click.option("--makefile", default="Makefile", show_default=True)
@click.argument("path", default=".", type=click.Path(file_okay=False))
def init(projid, clock, makefile, path):
    """Create a flor project in PATH."""
    Path(path).mkdir(parents=True, exist_ok=True)
    with Project.init(path, projid, clock, makefile) as p:
        click.echo(f"initialized {p.projid} in {p.root}")


@main.command()
@click.argument("goal", required=False)
@click.option("-k", "--kwargs", multiple=True, metavar="K=V", help="Override an arg of the steps.")
@click.option("-q", "--quiet", is_flag=True, help="Hide recipe output.")
def run(goal, kwargs, quiet):
    """Build GOAL (default: first target) and commit what the steps logged."""
    with _project() as p:
        report = run_goal(p, goal, _pairs(kwargs), quiet=quiet)
    for e in report.executed:
        click.echo(f"ran {e.target} ({e.filename}) exit={e.exit_code} {e.duration:.2f}s", err=True)
    click.echo(f"tstamp={report.tstamp} vid={report.vid} records={report.records_ingested} status={report.status}")
    if report.error:
        click.echo(f"error: {report.error}", err=True)
    if not report.ok:
        sys.exit(1)


@main.command("query")
@click.argument("names", nargs=-1, required=True)
@click.option("--csv", "as_csv", is_flag=True, help="Write CSV instead of an aligned table.")
def query_cmd(names, as_csv):
    """Pivot the logged values of NAMES into one table."""
    with _project() as p:
        table = q.dataframe(p.store, names)
    out = table.to_csv() if as_csv else table.to_text()
    sys.stdout.write(out)


@main.command()
@click.option("--names", required=True, help="Comma separated value names to backfill.")
@click.option("--since", type=int, help="Only versions whose tstamps reach SINCE.")
@click.option("--until", type=int, help="Only versions starting at or before UNTIL.")
@click.option("--dry-run", is_flag=True, help="Print the plan without executing it.")
@click.option("--full", is_flag=True, help="Never resume from checkpoints.")
@click.option("-j", "--workers", type=click.IntRange(min=1), default=1, show_default=True)
def replay(names, since, until, dry_run, full, workers):
    """Re-run past versions with the current logging statements."""
    requested = [n.strip() for n in names.split(",") if n.strip()]
    if not requested:
        raise click.BadParameter("no names given", param_hint="--names")
    with _project() as p:
        plan = rp.plan(p, requested, since, until, allow_resume=not full)
        click.echo(plan.describe(), nl=False)
        if dry_run:
            return
        report = rp.execute(p, plan, workers=workers)
    for r in report.results:
        line = f"{r.item.vid[:12]} tstamp={r.item.tstamp} {r.item.mode} iterations={r.iterations} added={r.records_added}"
        click.echo(line + (f" error: {r.error}" if r.error else ""))
    click.echo(f"records added: {report.records_added}")
    if plan.conflicts or not report.ok:
        sys.exit(1)


@main.command()
def versions():
    """List version intervals."""
    with _project() as p:
        for iv in p.intervals():
            click.echo(f"{iv.projid}\t{iv.ts_start}\t{iv.ts_end}\t{iv.vid}\t{iv.root_target}")


@main.command(context_settings={"ignore_unknown_options": True, "allow_extra_args": True})
@click.argument("name")
@click.option("--filename", default="feedback", show_default=True, help="File the value is attributed to.")
@click.pass_context
def feedback(ctx, name, filename):
    """Record NAME = VALUE at loop dimensions given as ``--<loop> <value>`` pairs.

    Example: ``flor feedback page_color --document a.pdf --page 1 green``.
    """
    extra = list(ctx.args)
    if not extra or extra[-1].startswith("--"):
        raise click.UsageError("missing VALUE")
    value, dims = extra[-1], extra[:-1]
    if len(dims) % 2 or any(not d.startswith("--") or len(d) < 3 for d in dims[::2]):
        raise click.UsageError("dimensions must be given as --<loop> <value> pairs")
    with _project() as p, p.lock():
        ivs = p.intervals()
        writer = p.open_run()
        parent = 0
        for flag, dim_value in zip(dims[::2], dims[1::2]):
            ctx_id = writer.next_ctx_id(filename)
            writer.put_loop(LoopIteration(p.projid, writer.tstamp, filename, ctx_id, parent, flag[2:], 0, dim_value))
            parent = ctx_id
        writer.log(filename, parent, name, value)
        tstamp, vid = p.commit(writer, root_target="feedback", extends=ivs[-1].ts_start if ivs else None)
    click.echo(f"tstamp={tstamp} vid={vid}")


@main.command()
@click.argument("metric")
@click.option("--minimize", is_flag=True, help="Prefer the smallest METRIC.")
@click.option("--model", default="model", show_default=True, help="Name of the checkpointed value.")
@click.option("--fallback", type=click.Path(exists=True, dir_okay=False), help="Used when no checkpoint qualifies.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
def checkpoint(metric, minimize, model, fallback, out):
    """Write the checkpoint with the best METRIC to OUT."""
    with _project() as p:
        h = q.best_checkpoint(p.store, metric, maximize=not minimize, model=model)
        if h is not None:
            Path(out).write_bytes(p.store.get_blob(h))
            click.echo(f"checkpoint {h}")
            return
    if fallback is None:
        raise FlorError(f"no checkpoint with {metric} and no fallback given")
    shutil.copyfile(fallback, out)
    click.echo(f"fallback {fallback}")


@main.command()
def reindex():
    """Rebuild the index from run files and git history."""
    with _project() as p, p.lock():
        p.rebuild_index()
        click.echo(f"indexed {p.store.record_count()} records")


@main.command()
@click.argument("dest", type=click.Path(file_okay=False))
def demo(dest):
    """Copy the PDF parser demo pipeline into DEST."""
    dest = Path(dest)
    if dest.exists() and any(dest.iterdir()):
        raise FlorError(f"{dest} is not empty")
    src = resources.files("flor") / "demo"
    with resources.as_file(src) as path:
        shutil.copytree(path, dest, dirs_exist_ok=True, ignore=shutil.ignore_patterns("__pycache__"))
    click.echo(f"demo pipeline written to {dest}")
