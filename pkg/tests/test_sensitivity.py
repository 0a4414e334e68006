import itertools
import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from durpriv.chunking import ChunkSpec
from durpriv.processing import TableMeta
from durpriv.query import Agg, Call, Col, Lit, parse_query
from durpriv.relational import Table, evaluate
from durpriv.sensitivity import (ColumnInfo, ConstraintSet, PlanError, aggregation_sensitivity, analyze_release,
                                 base_constraints, base_sensitivity, propagate)
from oracles import SCHEMA, check_soundness, random_case


def _meta(max_rows=10, chunk=5, pitch=None, n_chunks=40, fps=1):
    spec = ChunkSpec(chunk * fps, (pitch or chunk) * fps, fps)
    return TableMeta("cam0", spec, max_rows, tuple(float(i * (pitch or chunk)) for i in range(n_chunks)))


def _toy_worst_rows(max_rows, rho, k, chunk, n_frames=80):
    """Place k runs of rho frames every way on a frame line; rows that can flip = max_rows per touched chunk."""
    starts = range(0, n_frames - rho + 1)
    best = 0
    for placement in itertools.combinations(starts, k):
        frames = {f for s in placement for f in range(s, s + rho)}
        touched = {f // chunk for f in frames}
        best = max(best, len(touched) * max_rows)
    return best


def test_base_sensitivity_matches_toy_brute_force():
    assert _toy_worst_rows(10, 30, 2, 5) == 140
    assert base_sensitivity(_meta(10, 5), 30, 2) == 140
    assert _toy_worst_rows(3, 45, 1, 15) == 12
    assert base_sensitivity(_meta(3, 15), 45, 1) == 12
    assert base_sensitivity(_meta(10, 5), 30, 0) == 0


def _env(rho=30, k=2, **meta_kw):
    return {"t": base_constraints(_meta(**meta_kw), SCHEMA, rho, k)}


def _release(text, env=None):
    return analyze_release(parse_query(text).selects[0], env or _env(), "q")


def test_limit_bounds_the_row_count():
    child = ConstraintSet(4, {"v": ColumnInfo()}, None)
    stmt = parse_query("SELECT COUNT(*) FROM (SELECT v FROM t LIMIT 300)").selects[0]
    assert propagate(stmt.source, child).cs == 300


def test_union_adds_deltas():
    a = ConstraintSet(4, {"v": ColumnInfo()}, 10)
    b = ConstraintSet(6, {"v": ColumnInfo()}, 20)
    stmt = parse_query("SELECT COUNT(*) FROM t UNION u").selects[0]
    out = propagate(stmt.source, a, b)
    assert out.delta == 10 and out.cs == 30


def test_stateless_function_unbinds_the_range():
    child = ConstraintSet(4, {"speed": ColumnInfo("NUMBER", (0.0, 60.0))}, 10)
    stmt = parse_query("SELECT COUNT(*) FROM (SELECT abs(speed) AS speed FROM t)").selects[0]
    assert propagate(stmt.source, child).cr["speed"] is None
    with pytest.raises(PlanError, match="range"):
        _release("SELECT SUM(fast) FROM (SELECT abs(v) AS fast FROM t)")


def _sum_over(lo, hi):
    return Agg("SUM", Call("range", (Col("v"), Lit(lo), Lit(hi))))


def test_sum_scales_rows_by_range_width():
    c = ConstraintSet(140, {"v": ColumnInfo()}, None)
    assert aggregation_sensitivity(_sum_over(-10.0, 20.0), c) == (4200.0, 30.0)
    # with a range that excludes zero a whole row can vanish, so the width alone is not enough
    assert aggregation_sensitivity(_sum_over(30.0, 60.0), c) == (8400.0, 60.0)


def test_sum_over_a_range_away_from_zero_needs_the_full_magnitude():
    # 140 rows at the top of [30, 60] removed by the event: the sum drops by 8400, not 4200
    before = Table(("v",), [(60.0,)] * 140)
    after = Table(("v",), [])
    stmt = parse_query("SELECT SUM(range(v, 30, 60)) FROM t").selects[0]
    (a,), (b,) = evaluate(stmt, {"t": before}), evaluate(stmt, {"t": after})
    assert abs(a.raw - b.raw) == 8400.0 > 4200.0


def test_average_and_count_examples():
    c = ConstraintSet(10, {"v": ColumnInfo()}, 100)
    dq, cr = aggregation_sensitivity(Agg("AVG", Call("range", (Col("v"), Lit(0.0), Lit(16.0)))), c)
    assert dq == pytest.approx(1.6) and cr == 16.0
    assert aggregation_sensitivity(Agg("COUNT"), ConstraintSet(12, {}, None)) == (12.0, None)
    dq, _ = aggregation_sensitivity(Agg("VAR", Call("range", (Col("v"), Lit(0.0), Lit(16.0)))), c)
    assert dq == pytest.approx((10 * 16) ** 2 / 100)


@pytest.mark.parametrize("text, message", [
    ("SELECT AVG(range(n, 0, 1)) FROM (SELECT s, COUNT(*) AS n FROM t GROUP BY s)", "LIMIT"),
    ("SELECT SUM(v) FROM t", "range"),
    ("SELECT ARGMAX(s) FROM t", "KEYS"),
    ("SELECT COUNT(*) FROM t JOIN u ON s", "JOIN"),
    ("SELECT s, COUNT(*) FROM t GROUP BY s", "KEYS"),
    ("SELECT SUM(range(s, 0, 1)) FROM t", "NUMBER"),
    ("SELECT COUNT(*) FROM (SELECT v FROM t LIMIT 0)", "LIMIT"),
])
def test_unsupported_plans(text, message):
    env = _env()
    env["u"] = env["t"]
    with pytest.raises(PlanError, match=message):
        _release(text, env)


def test_analyst_group_by_can_move_rows_between_groups():
    grouped = _release("SELECT COUNT(*) FROM (SELECT s, COUNT(*) AS n FROM t GROUP BY s)")
    assert grouped.releases[0].delta_q == 280
    keyed = _release('SELECT s, COUNT(*) FROM t GROUP BY s WITH KEYS ["a", "b"]')
    assert [r.delta_q for r in keyed.releases] == [140, 140]


def test_hour_bins_limit_the_groups_an_event_reaches():
    group = _release("SELECT SUM(range(n, 0, 10)) FROM "
                     "(SELECT hour(chunk) AS h, COUNT(*) AS n FROM t GROUP BY hour(chunk))",
                     _env(rho=30, k=1, chunk=600, n_chunks=12))
    # a 30 s run touches at most 2 chunks, which sit in at most 2 hours
    assert group.releases[0].delta_q == 20
    # chunks at 3000 s and 3600 s straddle the hour: both hourly counts move by the full cap
    stmt = group.stmt
    empty = Table(("v", "s", "chunk", "region"), [])
    full = Table(empty.columns, [(0.0, "a", t, 0.0) for t in (3000.0, 3600.0) for _ in range(10)])
    (a,), (b,) = evaluate(stmt, {"t": empty}), evaluate(stmt, {"t": full})
    assert abs(a.raw - b.raw) == 20


ANALYZED = [
    "SELECT COUNT(*) FROM t",
    "SELECT SUM(range(v, {lo}, {hi})) FROM t",
    "SELECT AVG(range(v, {lo}, {hi})) FROM (SELECT v FROM t LIMIT 50)",
    "SELECT VAR(range(v, {lo}, {hi})) FROM (SELECT v FROM t LIMIT 50)",
    'SELECT s, SUM(range(v, {lo}, {hi})) FROM t GROUP BY s WITH KEYS ["a"]',
    "SELECT SUM(range(n, 0, {hi})) FROM (SELECT chunk, COUNT(*) AS n FROM t GROUP BY chunk)",
]


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(ANALYZED), st.floats(0, 120), st.floats(0, 60), st.integers(0, 3), st.integers(0, 2),
       st.integers(1, 5), st.integers(0, 3), st.floats(-5, 5), st.floats(0, 20), st.floats(0, 20),
       st.integers(1, 10), st.integers(1, 10))
def test_bounds_never_shrink_as_the_policy_or_range_grows(text, rho, d_rho, k, d_k, rows, d_rows, lo, w, d_w,
                                                         chunk, pitch):
    def dq(r, kk, m, width):
        q = text.format(lo=lo, hi=lo + width) if "{lo}" in text else text.format(hi=width)
        env = {"t": base_constraints(_meta(m, chunk, pitch, 20), SCHEMA, r, kk)}
        return _release(q, env).releases[0].delta_q

    base = dq(rho, k, rows, w)
    assert base >= 0 and math.isfinite(base)
    assert dq(rho + d_rho, k, rows, w) >= base
    assert dq(rho, k + d_k, rows, w) >= base
    assert dq(rho, k, rows + d_rows, w) >= base
    assert dq(rho, k, rows, w + d_w) >= base - 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 300), st.integers(0, 4), st.integers(1, 20), st.integers(1, 60))
def test_never_looser_than_the_stride_zero_formula(rho, k, rows, chunk):
    assert base_sensitivity(_meta(rows, chunk), rho, k) <= rows * k * (1 + math.ceil(rho / chunk))


def test_soundness_on_a_small_random_batch():
    rng = random.Random(11)
    for _ in range(60):
        result = check_soundness(random_case(rng), rng, budget=200)
        assert result.ok, (result.case.text, result.delta_q, result.worst)


def test_oracle_catches_a_halved_bound():
    """Sanity check on the oracle itself: halving every bound must be caught somewhere."""
    rng = random.Random(5)
    caught = 0
    for _ in range(40):
        result = check_soundness(random_case(rng, rng.choice(["count", "sum", "keyed_count"])), rng, budget=200)
        if any(w > d / 2 + 1e-9 for w, d in zip(result.worst, result.delta_q)):
            caught += 1
    assert caught > 0
