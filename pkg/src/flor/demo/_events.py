"""Minimal writer for the flor event protocol, shared by the demo steps."""

import json
import os

EVENTS = os.environ.get("FLOR_EVENTS")
CKPT_DIR = os.environ.get("FLOR_CKPT_DIR", "")
REPLAY = os.environ.get("FLOR_REPLAY") == "1"
_ARGS = json.loads(os.environ.get("FLOR_ARGS") or "{}")


def emit(kind, name="", value="", t=None):
    if not EVENTS:
        return
    obj = {"k": kind, "n": name, "v": value}
    if t is not None:
        obj["t"] = t
    with open(EVENTS, "a", encoding="utf-8") as f:
        f.write(json.dumps(obj, separators=(",", ":")) + "\n")


def _hint(value):
    if isinstance(value, bool) or isinstance(value, int):
        return 1
    if isinstance(value, float):
        return 2
    return None


def log(name, value):
    if isinstance(value, bool):
        value = int(value)
    text = value if isinstance(value, str) else json.dumps(value) if isinstance(value, (list, dict)) else repr(value)
    emit("log", name, text, _hint(value))
    return value


def arg(name, default):
    raw = _ARGS.get(name)
    value = default if raw is None else type(default)(raw)
    emit("arg", name, repr(default) if not isinstance(default, str) else default, _hint(default))
    return value


def loop(name, values):
    emit("loop_begin", name)
    for v in values:
        emit("iter_begin", name, str(v))
        yield v
        emit("iter_end", name)
    emit("loop_end", name)


def checkpoint(name, data, tag):
    path = os.path.join(os.path.dirname(os.path.abspath(EVENTS or ".")), f"ckpt-{name}-{tag}.bin")
    with open(path, "wb") as f:
        f.write(data)
    emit("ckpt", name, path)


def restore(loop_name, iteration, name):
    path = os.path.join(CKPT_DIR, loop_name, str(iteration), name)
    if CKPT_DIR and os.path.exists(path):
        with open(path, "rb") as f:
            return f.read()
    return None
