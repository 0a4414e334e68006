"""Sensitivity of release values under a duration policy, propagated bottom-up through the plan.

Bookkeeping conventions used throughout:

* ``delta`` bounds how many single-row edits (insert, delete or replace) separate a relation
  computed on two neighbouring traces.  For relations produced by GROUP BY it bounds the number
  of group keys whose row differs, which is what joins need.
* Column ``bounds`` are value ranges, not change widths.  A differing row can appear, vanish or
  change, so its contribution to a sum is bounded by ``max(hi - lo, |lo|, |hi|)``, the width of
  the range once zero is included.  That quantity is exposed as ``cr``.
"""

from __future__ import annotations

import math
import itertools
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

from .chunking import ChunkSpec, bins_touched, max_chunk_span
from .query import (Agg, Binary, Call, Col, ColumnDef, Expr, Join, Lit, Rel, SelectStmt, SubSelect, TableRef,
                    Unary, Union_, contains_agg)

HOUR = 3600.0
DAY = 86400.0


class PlanError(ValueError):
    """The plan falls outside what the sensitivity rules can bound."""


@dataclass(frozen=True)
class Source:
    """One processed table's exposure to a single event."""

    k: int
    span: int
    pitch_sec: float
    n_regions: int = 1
    boundary: str | None = None


@dataclass(frozen=True)
class ColumnInfo:
    dtype: str = "NUMBER"
    bounds: tuple[float, float] | None = None
    domain: tuple | None = None  # enumerable values the column can take, if known without data
    trusted: str | None = None  # "time" or "region" for engine-derived columns
    bin_sec: float | None = None  # for trusted time columns: width of one value's time bin


@dataclass(frozen=True)
class ConstraintSet:
    delta: float
    columns: Mapping[str, ColumnInfo]
    cs: int | None = None
    sources: tuple[Source, ...] = ()
    localized: bool = True  # differing rows sit in chunks the event touches
    stable_order: bool = True  # row order cannot be permuted by an event
    grouped_on: tuple[str, ...] | None = None  # at most one row per value of these columns

    @property
    def cr(self) -> dict[str, float | None]:
        return {name: contribution(info.bounds) for name, info in self.columns.items()}


def contribution(bounds: tuple[float, float] | None) -> float | None:
    if bounds is None:
        return None
    lo, hi = bounds
    return max(hi, 0.0) - min(lo, 0.0)


def base_sensitivity(meta, rho: float, k: int) -> int:
    """Rows that can differ in a processed table: max_rows per touched chunk, span chunks per segment."""
    if k == 0:
        return 0
    return meta.max_rows * k * max_chunk_span(rho, meta.chunk_spec)


def base_constraints(meta, schema: Sequence[ColumnDef], rho: float, k: int) -> ConstraintSet:
    spec = meta.chunk_spec
    columns = {c.name: ColumnInfo(c.dtype) for c in schema}
    times = tuple(meta.chunk_times)
    columns["chunk"] = ColumnInfo("NUMBER", (min(times), max(times)) if times else None, times, "time",
                                  spec.pitch_sec)
    regions = tuple(float(r) for r in range(meta.n_regions))
    columns["region"] = ColumnInfo("NUMBER", (0.0, float(meta.n_regions - 1)), regions, "region")
    n_units = len(times) * meta.n_regions
    src = Source(k, max_chunk_span(rho, spec), spec.pitch_sec, meta.n_regions, meta.boundary)
    return ConstraintSet(base_sensitivity(meta, rho, k), columns, n_units * meta.max_rows, (src,))


# ---------------------------------------------------------------- expressions

_STRING_FUNCS = ("lower", "upper")


def expr_info(expr: Expr, columns: Mapping[str, ColumnInfo]) -> ColumnInfo:
    """What is known about a row-level expression without looking at data."""
    if isinstance(expr, Col):
        if expr.name not in columns:
            raise PlanError(f"unknown column {expr.name!r}")
        return columns[expr.name]
    if isinstance(expr, Lit):
        if isinstance(expr.value, str):
            return ColumnInfo("STRING", domain=(expr.value,))
        return ColumnInfo("NUMBER", (expr.value, expr.value), (expr.value,))
    if isinstance(expr, Call):
        args = [expr_info(a, columns) for a in expr.args]
        if expr.fn == "range":
            if len(expr.args) != 3 or not all(isinstance(a, Lit) for a in expr.args[1:]):
                raise PlanError("range() takes a column and two numeric literals")
            lo, hi = float(expr.args[1].value), float(expr.args[2].value)
            if lo > hi:
                raise PlanError(f"range() lower bound {lo} exceeds upper bound {hi}")
            if args[0].dtype != "NUMBER":
                raise PlanError("range() applies to NUMBER columns")
            return ColumnInfo("NUMBER", (lo, hi))
        if expr.fn in ("hour", "day"):
            if len(args) != 1:
                raise PlanError(f"{expr.fn}() takes one argument")
            width = HOUR if expr.fn == "hour" else DAY
            inner = args[0]
            if inner.trusted == "time" and inner.domain is not None:
                dom = tuple(sorted({float(math.floor(t / width)) for t in inner.domain}))
                bounds = (dom[0], dom[-1]) if dom else None
                return ColumnInfo("NUMBER", bounds, dom, "time", max(width, inner.bin_sec or 0.0))
            return ColumnInfo("NUMBER")
        if any(a.dtype == "STRING" for a in args) and expr.fn not in _STRING_FUNCS + ("length",):
            raise PlanError(f"{expr.fn}() expects a NUMBER argument")
        return ColumnInfo("STRING" if expr.fn in _STRING_FUNCS else "NUMBER")
    if isinstance(expr, Unary):
        expr_info(expr.arg, columns)
        return ColumnInfo("NUMBER", (0.0, 1.0) if expr.op == "NOT" else None)
    if isinstance(expr, Binary):
        left, right = expr_info(expr.left, columns), expr_info(expr.right, columns)
        if expr.op in ("+", "-", "*", "/"):
            if "STRING" in (left.dtype, right.dtype):
                raise PlanError(f"arithmetic on STRING in {expr.op!r}")
            return ColumnInfo("NUMBER")
        return ColumnInfo("NUMBER", (0.0, 1.0))
    raise PlanError("aggregate used outside a grouping context")


def _hull(a, b):
    if a is None or b is None:
        return None
    return (min(a[0], b[0]), max(a[1], b[1]))


def _with_zero(bounds):
    return None if bounds is None else (min(bounds[0], 0.0), max(bounds[1], 0.0))


def agg_output_info(expr: Expr, columns: Mapping[str, ColumnInfo], group_cs: int | None) -> ColumnInfo:
    """Value range of a per-group aggregate item; explicit range() on the output wins."""
    if isinstance(expr, Call) and expr.fn == "range" and expr.args and contains_agg(expr.args[0]):
        agg_output_info(expr.args[0], columns, group_cs)
        if len(expr.args) != 3 or not all(isinstance(a, Lit) for a in expr.args[1:]):
            raise PlanError("range() takes a value and two numeric literals")
        lo, hi = float(expr.args[1].value), float(expr.args[2].value)
        if lo > hi:
            raise PlanError(f"range() lower bound {lo} exceeds upper bound {hi}")
        return ColumnInfo("NUMBER", (lo, hi))
    if isinstance(expr, Agg):
        if expr.fn == "ARGMAX":
            raise PlanError("ARGMAX is only allowed as a release")
        if expr.fn == "COUNT":
            if expr.arg is not None:
                expr_info(expr.arg, columns)
            return ColumnInfo("NUMBER", (0.0, float(group_cs)) if group_cs is not None else None)
        arg = expr_info(expr.arg, columns)
        if arg.dtype != "NUMBER":
            raise PlanError(f"{expr.fn} over a STRING column")
        b = arg.bounds
        if b is None:
            return ColumnInfo("NUMBER")
        if expr.fn == "SUM":
            if group_cs is None:
                return ColumnInfo("NUMBER")
            return ColumnInfo("NUMBER", (min(0.0, group_cs * b[0]), max(0.0, group_cs * b[1])))
        if expr.fn == "AVG":
            return ColumnInfo("NUMBER", _with_zero(b))
        return ColumnInfo("NUMBER", (0.0, (b[1] - b[0]) ** 2 / 4.0))
    # arithmetic over aggregates: only the type is known
    _check_group_expr(expr, columns, group_cs)
    return ColumnInfo("NUMBER")


def _check_group_expr(expr, columns, group_cs):
    if isinstance(expr, Agg):
        agg_output_info(expr, columns, group_cs)
    elif isinstance(expr, Unary):
        _check_group_expr(expr.arg, columns, group_cs)
    elif isinstance(expr, Binary):
        _check_group_expr(expr.left, columns, group_cs)
        _check_group_expr(expr.right, columns, group_cs)
    elif isinstance(expr, Call):
        for a in expr.args:
            _check_group_expr(a, columns, group_cs)
    else:
        expr_info(expr, columns)


# ---------------------------------------------------------------- relations

def _footprint(sources: Sequence[Source], bin_sec: float | None, by_region: bool) -> float:
    """Most distinct (time bin, region) groups one event can reach across all sources."""
    total = 0.0
    for s in sources:
        tb = bins_touched(s.span, s.pitch_sec, bin_sec) if bin_sec is not None else 1
        rm = s.n_regions if by_region and s.boundary == "soft" else 1
        total += s.k * min(s.span, tb * rm)
    return total


def _group_by(rel: SubSelect, child: ConstraintSet) -> ConstraintSet:
    cols = child.columns
    key_infos = [expr_info(g, cols) for g in rel.group_by]
    if rel.keys is not None:
        if len(rel.keys) != len(rel.group_by):
            raise PlanError("WITH KEYS needs one key list per GROUP BY column")
        key_infos = [replace(info, domain=tuple(ks)) for info, ks in zip(key_infos, rel.keys)]
    domains = [info.domain for info in key_infos]
    n_groups = math.prod(len(d) for d in domains) if all(d is not None for d in domains) else None
    if not rel.group_by:
        n_groups = 1
    trusted = all(info.trusted in ("time", "region") for info in key_infos)
    if not rel.group_by:
        delta = min(child.delta, 1.0)
    elif trusted and child.localized:
        time_bins = [info.bin_sec for info in key_infos if info.trusted == "time"]
        bin_sec = min(time_bins) if time_bins else None
        by_region = any(info.trusted == "region" for info in key_infos)
        delta = min(child.delta, _footprint(child.sources, bin_sec, by_region))
    elif trusted:
        # rows cannot move between engine-assigned groups, but edits are not confined to touched chunks
        delta = child.delta
    else:
        # an edited row can leave one analyst group and land in another
        delta = 2 * child.delta
    if n_groups is not None:
        delta = min(delta, n_groups)
    cs = n_groups
    if cs is not None and child.cs is not None and rel.keys is None:
        cs = min(cs, child.cs)
    group_cs = child.cs
    out: dict[str, ColumnInfo] = {}
    key_names = []
    for item in rel.items:
        if item.expr in rel.group_by:
            info = key_infos[rel.group_by.index(item.expr)]
            out[item.name] = info
            key_names.append(item.name)
        elif contains_agg(item.expr):
            out[item.name] = agg_output_info(item.expr, cols, group_cs)
        else:
            raise PlanError(f"column {item.name!r} is neither aggregated nor grouped")
    grouped_on = tuple(key_names) if len(key_names) == len(rel.group_by) else None
    stable = rel.keys is not None or trusted or not rel.group_by
    return ConstraintSet(delta, out, cs, child.sources, False, stable, grouped_on)


def _project(rel: SubSelect, child: ConstraintSet) -> ConstraintSet:
    out = {}
    passthrough = []
    for item in rel.items:
        out[item.name] = expr_info(item.expr, child.columns)
        if isinstance(item.expr, Col):
            passthrough.append((item.expr.name, item.name))
    grouped_on = None
    if child.grouped_on is not None:
        mapping = dict(passthrough)
        if all(k in mapping for k in child.grouped_on):
            grouped_on = tuple(mapping[k] for k in child.grouped_on)
    return replace(child, columns=out, grouped_on=grouped_on)


def _names_unique(items) -> None:
    names = [i.name for i in items]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise PlanError(f"duplicate output column(s) {sorted(dupes)}; add AS aliases")


def analyze_rel(rel: Rel, env: Mapping[str, ConstraintSet]) -> ConstraintSet:
    if isinstance(rel, TableRef):
        if rel.name not in env:
            raise PlanError(f"unknown table {rel.name!r}")
        return env[rel.name]
    if isinstance(rel, SubSelect):
        child = analyze_rel(rel.source, env)
        return propagate(rel, child)
    if isinstance(rel, Union_):
        return propagate(rel, analyze_rel(rel.left, env), analyze_rel(rel.right, env))
    if isinstance(rel, Join):
        return propagate(rel, analyze_rel(rel.left, env), analyze_rel(rel.right, env))
    raise PlanError(f"unsupported relation {rel!r}")


def propagate(node, *children: ConstraintSet) -> ConstraintSet:
    """Constraint set of ``node``'s output given its inputs' constraint sets."""
    if isinstance(node, SubSelect):
        (child,) = children
        _names_unique(node.items)
        if node.where is not None:
            expr_info(node.where, child.columns)
        grouping = bool(node.group_by) or any(contains_agg(i.expr) for i in node.items)
        if node.keys is not None and not node.group_by:
            raise PlanError("WITH KEYS without GROUP BY")
        out = _group_by(node, child) if grouping else _project(node, child)
        if node.limit is not None:
            if node.limit < 1:
                raise PlanError("LIMIT must be positive")
            delta = out.delta if out.stable_order else 2 * out.delta
            cs = node.limit if out.cs is None else min(node.limit, out.cs)
            out = replace(out, delta=delta, cs=cs, localized=False, grouped_on=None)
        return out
    if isinstance(node, Union_):
        left, right = children
        if set(left.columns) != set(right.columns):
            raise PlanError("UNION inputs must have the same columns")
        cols = {}
        for name, a in left.columns.items():
            b = right.columns[name]
            if a.dtype != b.dtype:
                raise PlanError(f"UNION column {name!r} has mismatched types")
            dom = tuple(sorted(set(a.domain) | set(b.domain), key=repr)) if a.domain and b.domain else None
            same_trust = a.trusted == b.trusted and a.bin_sec == b.bin_sec
            cols[name] = ColumnInfo(a.dtype, _hull(a.bounds, b.bounds), dom, a.trusted if same_trust else None,
                                    a.bin_sec if same_trust else None)
        cs = left.cs + right.cs if left.cs is not None and right.cs is not None else None
        return ConstraintSet(left.delta + right.delta, cols, cs, left.sources + right.sources,
                             left.localized and right.localized, left.stable_order and right.stable_order)
    if isinstance(node, Join):
        left, right = children
        for side, cset in (("left", left), ("right", right)):
            if cset.grouped_on is None or set(cset.grouped_on) != set(node.on):
                raise PlanError(f"JOIN needs its {side} input grouped by exactly the join keys {list(node.on)}")
        cols = {}
        for name in node.on:
            a, b = left.columns[name], right.columns[name]
            if a.dtype != b.dtype:
                raise PlanError(f"JOIN key {name!r} has mismatched types")
            cols[name] = replace(a, bounds=_hull(a.bounds, b.bounds)) if node.outer else a
        for cset in (left, right):
            for name, info in cset.columns.items():
                if name in node.on:
                    continue
                if name in cols:
                    raise PlanError(f"JOIN inputs both have column {name!r}; rename one with AS")
                cols[name] = replace(info, bounds=_with_zero(info.bounds), domain=None) if node.outer else info
        if node.outer:
            cs = left.cs + right.cs if left.cs is not None and right.cs is not None else None
        else:
            bound = [c for c in (left.cs, right.cs) if c is not None]
            cs = min(bound) if bound else None
        return ConstraintSet(left.delta + right.delta, cols, cs, left.sources + right.sources, False, False,
                             tuple(node.on))
    raise PlanError(f"no propagation rule for {type(node).__name__}")


# ---------------------------------------------------------------- releases

@dataclass(frozen=True)
class ReleaseSensitivity:
    release_id: str
    key: tuple | None
    agg: str
    delta: float
    cr: float | None
    cs: int | None
    delta_q: float


def aggregation_sensitivity(agg: Agg, c: ConstraintSet) -> tuple[float, float | None]:
    """(delta_q, cr) for one aggregate over a relation with constraints ``c``."""
    if agg.fn in ("COUNT", "ARGMAX"):
        if agg.arg is not None:
            expr_info(agg.arg, c.columns)
        return float(c.delta), None
    arg = expr_info(agg.arg, c.columns)
    if arg.dtype != "NUMBER":
        raise PlanError(f"{agg.fn} over a STRING expression")
    cr = contribution(arg.bounds)
    if cr is None:
        raise PlanError(f"{agg.fn} needs a bounded value: wrap the column in range(col, lo, hi)")
    if agg.fn == "SUM":
        return c.delta * cr, cr
    if c.cs is None:
        raise PlanError(f"{agg.fn} needs a row-count bound: add LIMIT or GROUP BY ... WITH KEYS")
    if c.cs == 0:
        raise PlanError(f"{agg.fn} over a relation that can hold no rows (empty window?)")
    if agg.fn == "AVG":
        return c.delta * cr / c.cs, cr
    if agg.fn == "VAR":
        return (c.delta * cr) ** 2 / c.cs, cr
    raise PlanError(f"unknown aggregate {agg.fn}")


@dataclass(frozen=True)
class ReleaseGroup:
    """Everything about one SELECT statement's releases that can be known before running it."""

    stmt: SelectStmt
    prefix: str
    keys: tuple[tuple, ...] | None
    releases: tuple[ReleaseSensitivity, ...]
    size_bound: int | None


def analyze_release(stmt: SelectStmt, env: Mapping[str, ConstraintSet], prefix: str) -> ReleaseGroup:
    rel = analyze_rel(stmt.source, env)
    if stmt.where is not None:
        expr_info(stmt.where, rel.columns)
    agg = stmt.aggregate
    if agg.fn == "ARGMAX":
        if stmt.group_by:
            raise PlanError("ARGMAX cannot be combined with GROUP BY")
        if not stmt.keys or len(stmt.keys) != 1 or not stmt.keys[0]:
            raise PlanError("ARGMAX needs one non-empty WITH KEYS list")
        if agg.arg is None:
            raise PlanError("ARGMAX needs a column")
        dq, cr = aggregation_sensitivity(agg, rel)
        rs = ReleaseSensitivity(prefix, None, agg.fn, rel.delta, cr, rel.cs, dq)
        return ReleaseGroup(stmt, prefix, stmt.keys, (rs,), rel.cs)
    if stmt.keys is not None and not stmt.group_by:
        raise PlanError("WITH KEYS without GROUP BY")
    dq, cr = aggregation_sensitivity(agg, rel)
    if not stmt.group_by:
        rs = ReleaseSensitivity(prefix, None, agg.fn, rel.delta, cr, rel.cs, dq)
        return ReleaseGroup(stmt, prefix, None, (rs,), rel.cs)
    infos = [expr_info(g, rel.columns) for g in stmt.group_by]
    if stmt.keys is not None:
        if len(stmt.keys) != len(stmt.group_by):
            raise PlanError("WITH KEYS needs one key list per GROUP BY column")
        keys = tuple(tuple(ks) for ks in stmt.keys)
    else:
        missing = [i for i, info in enumerate(infos) if info.trusted is None or info.domain is None]
        if missing:
            raise PlanError("GROUP BY over analyst columns needs WITH KEYS [...]")
        keys = tuple(tuple(info.domain) for info in infos)
    releases = []
    for combo in itertools.product(*keys):
        label = ",".join(_fmt_key(v) for v in combo)
        releases.append(ReleaseSensitivity(f"{prefix}[{label}]", tuple(combo), agg.fn, rel.delta, cr, rel.cs, dq))
    return ReleaseGroup(stmt, prefix, keys, tuple(releases), rel.cs)


def _fmt_key(k) -> str:
    if isinstance(k, float) and k.is_integer():
        return str(int(k))
    return str(k)
