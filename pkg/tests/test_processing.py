import math
import random
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import stream_from_visits
from durpriv.chunking import ChunkSpec, split
from durpriv.processing import (ProcessorMissing, coerce_row, default_row, resolve_executable, run_chunk,
                                run_processor, sandbox_mode)
from durpriv.query import ColumnDef, Duration, ProcessStmt

TWO_COLS = (ColumnDef("name", "STRING", ""), ColumnDef("value", "NUMBER", 0))
CAR_COLS = (ColumnDef("plate", "STRING", ""), ColumnDef("color", "STRING", ""), ColumnDef("speed", "NUMBER", 0))


def _stmt(executable, max_rows=10, timeout=5.0, schema=TWO_COLS):
    return ProcessStmt("chunks", executable, Duration(timeout), max_rows, schema, "t")


def _chunks(n_frames=30, chunk=10, visits=None):
    stream = stream_from_visits(visits or {"a": [0, 1, 2]}, n_frames)
    return stream, split(stream, ChunkSpec(chunk, chunk, 1))


def _run(executable, processors_dir, chunks=None, **kw):
    stmt_kw = {k: kw.pop(k) for k in ("max_rows", "timeout", "schema") if k in kw}
    if chunks is None:
        _, chunks = _chunks()
    return run_processor(chunks, _stmt(executable, **stmt_kw), "cam0", ChunkSpec(10, 10, 1),
                         base_dir=processors_dir, **kw)


def test_two_rows_per_chunk(processors_dir):
    table = _run("echo_two.py", processors_dir)
    assert len(table) == 6
    assert table.columns == ("name", "value", "chunk", "region")
    assert table.rows[:2] == [("a", 0.0, 0.0, 0.0), ("b", 10.0, 0.0, 0.0)]
    assert [r[2] for r in table.rows] == [0.0, 0.0, 10.0, 10.0, 20.0, 20.0]
    assert table.failures == {}


def test_row_cap_keeps_the_first_rows(processors_dir):
    table = _run("over_emit.py", processors_dir, max_rows=10)
    per_chunk = [r for r in table.rows if r[2] == 0.0]
    assert [r[0] for r in per_chunk] == [f"row{i}" for i in range(10)]
    assert len(table) == 30


def test_timeout_gives_one_default_row(processors_dir):
    _, chunks = _chunks(10)
    started = time.monotonic()
    table = _run("slow.py", processors_dir, chunks=chunks, timeout=1.0)
    assert time.monotonic() - started < 10
    assert table.rows == [("", 0.0, 0.0, 0.0)]
    assert table.failures == {(0, 0): "timeout"}


@pytest.mark.parametrize("name", ["crash.py", "bad_exit.py"])
def test_failed_instance_gives_one_default_row(processors_dir, name):
    _, chunks = _chunks(10)
    table = _run(name, processors_dir, chunks=chunks)
    assert table.rows == [("", 0.0, 0.0, 0.0)]
    assert table.failures == {(0, 0): "crash"}


def test_schema_violations_are_coerced(processors_dir):
    _, chunks = _chunks(10)
    table = _run("schema_violate.py", processors_dir, chunks=chunks, max_rows=10)
    assert len(table) == 7
    assert all(math.isfinite(r[1]) for r in table.rows)
    assert [r[1] for r in table.rows[3:]] == [0.0, 0.0, 0.0, 0.0]
    assert table.rows[0][:2] == ("x", 0.0)
    assert table.rows[1][:2] == ("", 0.0)
    assert table.rows[2][:2] == ("only-one-cell", 0.0)


@pytest.mark.parametrize("line, expected", [
    ("ABC123\tRED\t45.0", ("ABC123", "RED", 45.0)),
    ("x\ty\tnot-a-number", ("x", "y", 0.0)),
    ("", ("", "", 0.0)),
    ("p\tq\tnan", ("p", "q", 0.0)),
    ("p\tq\t-inf", ("p", "q", 0.0)),
    ("p", ("p", "", 0.0)),
])
def test_coerce_row_examples(line, expected):
    assert coerce_row(line, CAR_COLS) == expected


def test_defaults_follow_the_schema():
    schema = (ColumnDef("s", "STRING", "none"), ColumnDef("n", "NUMBER", -1))
    assert default_row(schema) == ("none", -1.0)
    assert coerce_row("\tbad", schema) == ("", -1.0)


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=200))
def test_coerce_row_is_total_and_finite(line):
    row = coerce_row(line, CAR_COLS)
    assert len(row) == 3
    assert isinstance(row[0], str) and isinstance(row[1], str)
    assert isinstance(row[2], float) and math.isfinite(row[2])


@pytest.mark.skipif(sandbox_mode() != "mount", reason="needs the mount namespace sandbox")
def test_instances_cannot_pass_state_between_chunks(processors_dir):
    table = _run("stateful.py", processors_dir)
    assert [r[0] for r in table.rows] == ["fresh"] * 3


def test_missing_executable(processors_dir):
    with pytest.raises(ProcessorMissing):
        resolve_executable("nope.py", processors_dir)
    with pytest.raises(ProcessorMissing):
        _run("nope.py", processors_dir)


def test_bundled_processors_are_found():
    assert resolve_executable("cars.py").path.name == "cars.py"


def test_table_does_not_depend_on_chunk_order(processors_dir):
    _, chunks = _chunks(40, visits={"a": [0, 1, 15], "b": [22, 23, 35]})
    shuffled = list(chunks)
    random.Random(3).shuffle(shuffled)
    assert _run("echo_two.py", processors_dir, chunks=chunks).rows == \
        _run("echo_two.py", processors_dir, chunks=shuffled).rows


def test_parallel_workers_match_serial(processors_dir):
    assert _run("echo_two.py", processors_dir, workers=2).rows == _run("echo_two.py", processors_dir).rows


def test_padding_hides_fast_chunks(processors_dir):
    _, chunks = _chunks(10)
    started = time.monotonic()
    _run("echo_two.py", processors_dir, chunks=chunks, timeout=1.5, pad_to_timeout=True)
    assert time.monotonic() - started >= 1.5


def test_single_chunk_run(processors_dir):
    exe = resolve_executable("echo_two.py", processors_dir)
    res = run_chunk(exe, "cam0\t7.0\t1\t3\n", TWO_COLS, 1, 5.0)
    assert res.status == "ok"
    assert res.rows == (("a", 7.0),)
