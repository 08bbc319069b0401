from __future__ import annotations

import hashlib
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flor.errors import IntegrityError, NotFoundError
from flor.store import (
    BLOB,
    FLOAT,
    INT,
    TEXT,
    LogRecord,
    LoopIteration,
    Store,
    decode_value,
    encode_value,
    read_run_file,
)


@pytest.fixture
def store(tmp_path):
    s = Store(tmp_path / ".flor")
    yield s
    s.close()


def loop(ctx, parent, name, it, value, tstamp=1, filename="f.py"):
    return LoopIteration("p", tstamp, filename, ctx, parent, name, it, value)


def rec(ctx, name, value, tstamp=1, filename="f.py", vt=TEXT):
    return LogRecord("p", tstamp, filename, ctx, name, value, vt)


class TestEncode:
    def test_int(self):
        assert encode_value(500) == (INT, "500")

    def test_empty_text(self):
        assert encode_value("") == (TEXT, "")

    def test_float_shortest_repr(self):
        assert encode_value(0.1) == (FLOAT, "0.1")
        assert encode_value(1e-3) == (FLOAT, "0.001")

    def test_bool_is_int(self):
        assert encode_value(True) == (INT, "1")

    def test_long_text_goes_to_blob(self, store):
        text = "x" * 5000
        vt, h = encode_value(text, put_blob=store.put_blob)
        assert vt == BLOB
        assert h == hashlib.sha256(text.encode()).hexdigest()
        assert store.get_blob(h) == text.encode()

    def test_text_at_limit_stays_inline(self):
        text = "é" * 2048  # 4096 bytes
        assert encode_value(text) == (TEXT, text)

    def test_unsupported_type_names_value(self):
        with pytest.raises(TypeError, match="weights"):
            encode_value(object(), name="weights")

    def test_blob_without_store(self):
        with pytest.raises(TypeError):
            encode_value(b"abc")

    @settings(max_examples=200, deadline=None)
    @given(st.one_of(
        st.integers(),
        st.floats(allow_nan=False),
        st.text(max_size=300),
        st.binary(max_size=300),
    ))
    def test_round_trip(self, tmp_path_factory, raw):
        s = Store(tmp_path_factory.mktemp("rt"))
        vt, payload = encode_value(raw, put_blob=s.put_blob)
        back = decode_value(vt, payload, get_blob=s.get_blob)
        if isinstance(raw, float) and math.isinf(raw):
            assert back == raw
        else:
            assert back == raw and type(back) is type(raw)
        s.close()


class TestBlobs:
    def test_empty_digest(self, store):
        assert store.put_blob(b"") == hashlib.sha256(b"").hexdigest()

    def test_dedup(self, store):
        a = store.put_blob(b"weights")
        b = store.put_blob(b"weights")
        assert a == b
        assert store.blob_count() == 1

    def test_layout(self, store):
        h = store.put_blob(b"abc")
        assert (store.root / "objects" / h[:2] / h).read_bytes() == b"abc"

    def test_unknown_hash(self, store):
        with pytest.raises(NotFoundError):
            store.get_blob("0" * 64)


class TestWriter:
    def test_document_page_ctx_ids(self, store):
        w = store.open_run("p", 1)
        ctx = 0
        for d, doc in enumerate(["a.pdf", "b.pdf"]):
            ctx += 1
            doc_ctx = ctx
            w.put_loop(loop(doc_ctx, 0, "document", d, doc))
            for page in range(2):
                ctx += 1
                w.put_loop(loop(ctx, doc_ctx, "page", page, str(page)))
        got = [(it.ctx_id, it.parent_ctx_id, it.loop_name) for it in w.loops]
        assert got == [
            (1, 0, "document"), (2, 1, "page"), (3, 1, "page"),
            (4, 0, "document"), (5, 4, "page"), (6, 4, "page"),
        ]

    def test_seq_follows_emission_order(self, store):
        w = store.open_run("p", 1)
        w.put_loop(loop(1, 0, "page", 0, "0"))
        w.put_loop(loop(2, 0, "page", 1, "1"))
        seqs = [w.put_record(rec(c, "text_src", "OCR")) for c in (1, 2, 1, 2)]
        assert seqs == [1, 2, 3, 4]

    def test_duplicate_key_keeps_both(self, store):
        w = store.open_run("p", 1)
        assert w.put_record(rec(0, "x", "a")) == 1
        assert w.put_record(rec(0, "x", "b")) == 2
        store.write_run(w)
        assert [r.value for r in store.scan(value_name="x")] == ["a", "b"]

    def test_dangling_ctx(self, store):
        w = store.open_run("p", 1)
        with pytest.raises(IntegrityError, match="dangling"):
            w.put_record(rec(3, "x", "a"))

    def test_dangling_parent(self, store):
        w = store.open_run("p", 1)
        with pytest.raises(IntegrityError, match="dangling parent"):
            w.put_loop(loop(2, 1, "page", 0, "0"))

    def test_duplicate_ctx(self, store):
        w = store.open_run("p", 1)
        w.put_loop(loop(1, 0, "epoch", 0, "0"))
        with pytest.raises(IntegrityError, match="duplicate"):
            w.put_loop(loop(1, 0, "epoch", 1, "1"))

    def test_iterations_consecutive(self, store):
        w = store.open_run("p", 1)
        w.put_loop(loop(1, 0, "epoch", 0, "0"))
        with pytest.raises(IntegrityError, match="does not follow"):
            w.put_loop(loop(2, 0, "epoch", 2, "2"))

    def test_missing_blob(self, store):
        w = store.open_run("p", 1)
        with pytest.raises(IntegrityError, match="not stored"):
            w.put_record(rec(0, "model", "ab" * 32, vt=BLOB))

    def test_wrong_run_key(self, store):
        w = store.open_run("p", 1)
        with pytest.raises(IntegrityError):
            w.put_record(rec(0, "x", "a", tstamp=2))

    def test_zero_iteration_loop_has_no_rows(self, store):
        w = store.open_run("p", 1)
        w.put_record(rec(0, "x", "1"))
        store.write_run(w)
        assert store.loops() == []

    def test_extend_continues_seq_and_ctx(self, store):
        w = store.open_run("p", 1)
        w.put_loop(loop(1, 0, "epoch", 0, "0"))
        w.put_record(rec(1, "acc", "0.5"))
        store.write_run(w)
        ext = store.open_run("p", 1, extend=True)
        assert ext.find_loop("f.py", 0, "epoch", 0) == 1
        assert ext.has_value("f.py", 1, "acc")
        assert ext.next_ctx_id("f.py") == 2
        assert ext.put_record(rec(1, "recall", "0.7")) == 2


class TestReads:
    def _train(self, store, tstamp):
        w = store.open_run("p", tstamp)
        ctx = 0
        for e in range(5):
            ctx += 1
            ep = ctx
            w.put_loop(loop(ep, 0, "epoch", e, str(e), tstamp, "train.py"))
            for s in range(2):
                ctx += 1
                w.put_loop(loop(ctx, ep, "step", s, str(s), tstamp, "train.py"))
                w.put_record(rec(ctx, "loss", repr(1 / (ctx + 1)), tstamp, "train.py", FLOAT))
            w.put_record(rec(ep, "acc", "0.5", tstamp, "train.py", FLOAT))
        store.write_run(w)

    def test_scan_loss_count(self, store):
        self._train(store, 1)
        assert len(list(store.scan(value_name="loss"))) == 10

    def test_scan_one_run(self, store):
        self._train(store, 1)
        self._train(store, 2)
        got = list(store.scan(tstamp=2, filename="train.py"))
        assert got and {(r.tstamp, r.filename) for r in got} == {(2, "train.py")}

    def test_scan_order(self, store):
        self._train(store, 2)
        self._train(store, 1)
        keys = [(r.tstamp, r.filename, r.seq) for r in store.scan()]
        assert keys == sorted(keys)

    def test_restart_durability(self, tmp_path):
        root = tmp_path / ".flor"
        s = Store(root)
        self._train(s, 1)
        before = sorted(s.scan(), key=lambda r: r.seq)
        s.close()
        (root / "index.db").unlink()
        s2 = Store(root)
        assert sorted(s2.scan(), key=lambda r: r.seq) == before
        assert s2.audit() == []
        s2.close()

    def test_rebuild_is_deterministic(self, store):
        self._train(store, 1)
        before = list(store.scan())
        store.rebuild()
        assert list(store.scan()) == before

    def test_run_file_is_self_describing(self, store):
        self._train(store, 1)
        loops, logs = read_run_file(store.run_files()[0])
        assert len(loops) == 15 and len(logs) == 15

    def test_write_run_refuses_overwrite(self, store):
        self._train(store, 1)
        w = store.open_run("p", 1)
        with pytest.raises(IntegrityError):
            store.write_run(w)

    def test_args_view(self, store):
        w = store.open_run("p", 1)
        w.log("train.py", 0, "arg::hidden", 500)
        w.log("train.py", 0, "argsrc::hidden", "default")
        w.log("train.py", 0, "arg::lr", 0.01)
        w.log("train.py", 0, "argsrc::lr", "override")
        store.write_run(w)
        args = store.args("p", 1, "train.py")
        assert args["hidden"].value == "500" and args["hidden"].was_default
        assert args["lr"].value == "0.01" and not args["lr"].was_default

    def test_reserved_names_hidden(self, store):
        w = store.open_run("p", 1)
        w.log("f.py", 0, "arg::hidden", 500)
        w.log("f.py", 0, "acc", 0.5)
        store.write_run(w)
        assert store.value_names() == ["acc"]
        assert "arg::hidden" in store.value_names(include_reserved=True)
