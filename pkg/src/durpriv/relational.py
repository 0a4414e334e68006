"""Relational evaluation of SELECT statements over intermediate tables (pre-noise values)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from .query import (Agg, Binary, Call, Col, Expr, Join, Lit, Rel, SelectStmt, SubSelect, TableRef, Unary,
                    Union_, contains_agg)


class EvaluationError(ValueError):
    pass


@dataclass
class Table:
    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [r[i] for r in self.rows]


@dataclass(frozen=True)
class ReleaseValue:
    release_id: str
    key: tuple | None
    raw: float
    empty: bool = False
    scores: tuple[tuple[Any, float], ...] | None = None  # ARGMAX only: (key, count) per declared key


def clamp(value: float, lo: float, hi: float) -> float:
    return min(max(value, lo), hi)


def _num(v) -> float:
    if isinstance(v, bool):
        return float(v)
    if isinstance(v, (int, float)):
        return float(v)
    return 0.0


def _finite(v: float) -> float:
    return v if math.isfinite(v) else 0.0


def _call(fn: str, args: list):
    if fn == "range":
        return clamp(_num(args[0]), _num(args[1]), _num(args[2]))
    if fn == "hour":
        return float(math.floor(_num(args[0]) / 3600.0))
    if fn == "day":
        return float(math.floor(_num(args[0]) / 86400.0))
    if fn == "abs":
        return abs(_num(args[0]))
    if fn == "floor":
        return float(math.floor(_num(args[0])))
    if fn == "ceil":
        return float(math.ceil(_num(args[0])))
    if fn == "round":
        return float(round(_num(args[0])))
    if fn == "sqrt":
        x = _num(args[0])
        return math.sqrt(x) if x > 0 else 0.0
    if fn == "lower":
        return str(args[0]).lower()
    if fn == "upper":
        return str(args[0]).upper()
    if fn == "length":
        return float(len(str(args[0])))
    raise EvaluationError(f"unknown function {fn}")


def _compare(op: str, a, b) -> bool:
    if isinstance(a, str) != isinstance(b, str):
        return op == "!="
    if op == "=":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def _arith(op: str, a, b) -> float:
    a, b = _num(a), _num(b)
    if op == "+":
        return _finite(a + b)
    if op == "-":
        return _finite(a - b)
    if op == "*":
        return _finite(a * b)
    return _finite(a / b) if b != 0 else 0.0


def eval_expr(expr: Expr, row: Mapping[str, Any]):
    if isinstance(expr, Col):
        try:
            return row[expr.name]
        except KeyError:
            raise EvaluationError(f"unknown column {expr.name!r}") from None
    if isinstance(expr, Lit):
        return expr.value
    if isinstance(expr, Unary):
        v = eval_expr(expr.arg, row)
        return (not _truthy(v)) if expr.op == "NOT" else -_num(v)
    if isinstance(expr, Binary):
        if expr.op == "AND":
            return _truthy(eval_expr(expr.left, row)) and _truthy(eval_expr(expr.right, row))
        if expr.op == "OR":
            return _truthy(eval_expr(expr.left, row)) or _truthy(eval_expr(expr.right, row))
        a, b = eval_expr(expr.left, row), eval_expr(expr.right, row)
        if expr.op in ("+", "-", "*", "/"):
            return _arith(expr.op, a, b)
        return _compare(expr.op, a, b)
    if isinstance(expr, Call):
        return _call(expr.fn, [eval_expr(a, row) for a in expr.args])
    raise EvaluationError(f"aggregate {expr!r} outside a grouping context")


def _truthy(v) -> bool:
    if isinstance(v, str):
        return v != ""
    return bool(v)


def aggregate(agg: Agg, rows: Sequence[Mapping[str, Any]], denominator: float | None = None) -> tuple[float, bool]:
    """Value of one aggregate over rows, plus whether the input was empty.

    AVG and VAR divide by ``denominator`` when given (a fixed size bound) instead of the row count.
    """
    n = len(rows)
    if agg.fn == "COUNT":
        return float(n), n == 0
    values = [_num(eval_expr(agg.arg, r)) for r in rows]
    if agg.fn == "SUM":
        return _finite(math.fsum(values)), n == 0
    if agg.fn in ("AVG", "VAR"):
        denom = denominator if denominator is not None else n
        if denom <= 0:
            return 0.0, True
        mean = math.fsum(values) / denom
        if agg.fn == "AVG":
            return _finite(mean), n == 0
        second = math.fsum(v * v for v in values) / denom
        return _finite(max(second - mean * mean, 0.0)), n == 0
    raise EvaluationError(f"{agg.fn} is not a scalar aggregate")


def eval_group_expr(expr: Expr, rows: Sequence[Mapping[str, Any]], key_env: Mapping[str, Any]):
    """Evaluate a select item for one group: aggregates see the group's rows, columns see the key."""
    if isinstance(expr, Agg):
        return aggregate(expr, rows)[0]
    if not contains_agg(expr):
        return eval_expr(expr, key_env)
    if isinstance(expr, Unary):
        v = eval_group_expr(expr.arg, rows, key_env)
        return (not _truthy(v)) if expr.op == "NOT" else -_num(v)
    if isinstance(expr, Binary):
        a = eval_group_expr(expr.left, rows, key_env)
        b = eval_group_expr(expr.right, rows, key_env)
        if expr.op in ("+", "-", "*", "/"):
            return _arith(expr.op, a, b)
        if expr.op == "AND":
            return _truthy(a) and _truthy(b)
        if expr.op == "OR":
            return _truthy(a) or _truthy(b)
        return _compare(expr.op, a, b)
    if isinstance(expr, Call):
        return _call(expr.fn, [eval_group_expr(a, rows, key_env) for a in expr.args])
    raise EvaluationError(f"cannot evaluate {expr!r} per group")


def _dicts(table: Table) -> list[dict]:
    return [dict(zip(table.columns, r)) for r in table.rows]


def _group(rows: list[dict], group_by: Sequence[Expr], keys: Sequence[Sequence] | None):
    """Ordered (key tuple, rows) pairs; declared keys are all emitted and nothing else is."""
    buckets: dict[tuple, list[dict]] = {}
    for r in rows:
        k = tuple(eval_expr(g, r) for g in group_by)
        buckets.setdefault(k, []).append(r)
    if keys is not None:
        combos = [tuple(c) for c in itertools.product(*keys)]
        return [(c, buckets.get(c, [])) for c in combos]
    return list(buckets.items())


def _key_env(group_by: Sequence[Expr], key: tuple, items) -> dict:
    env: dict[str, Any] = {}
    for g, v in zip(group_by, key):
        if isinstance(g, Col):
            env[g.name] = v
    return env


def _eval_item_for_group(expr: Expr, group_by: Sequence[Expr], key: tuple, rows, env):
    for g, v in zip(group_by, key):
        if expr == g:
            return v
    return eval_group_expr(expr, rows, env)


def eval_rel(rel: Rel, tables: Mapping[str, Table]) -> Table:
    if isinstance(rel, TableRef):
        try:
            return tables[rel.name]
        except KeyError:
            raise EvaluationError(f"unknown table {rel.name!r}") from None
    if isinstance(rel, SubSelect):
        src = eval_rel(rel.source, tables)
        rows = _dicts(src)
        if rel.where is not None:
            rows = [r for r in rows if _truthy(eval_expr(rel.where, r))]
        columns = tuple(i.name for i in rel.items)
        grouping = bool(rel.group_by) or any(contains_agg(i.expr) for i in rel.items)
        if grouping:
            groups = _group(rows, rel.group_by, rel.keys) if rel.group_by else [((), rows)]
            out = []
            for key, grows in groups:
                env = _key_env(rel.group_by, key, rel.items)
                out.append(tuple(_eval_item_for_group(i.expr, rel.group_by, key, grows, env) for i in rel.items))
        else:
            out = [tuple(eval_expr(i.expr, r) for i in rel.items) for r in rows]
        if rel.limit is not None:
            out = out[:rel.limit]
        return Table(columns, out)
    if isinstance(rel, Union_):
        left, right = eval_rel(rel.left, tables), eval_rel(rel.right, tables)
        if set(left.columns) != set(right.columns):
            raise EvaluationError("UNION inputs must have the same columns")
        idx = [right.columns.index(c) for c in left.columns]
        return Table(left.columns, list(left.rows) + [tuple(r[i] for i in idx) for r in right.rows])
    if isinstance(rel, Join):
        return _join(eval_rel(rel.left, tables), eval_rel(rel.right, tables), rel.on, rel.outer)
    raise EvaluationError(f"unsupported relation {rel!r}")


def _pad_value(table: Table, col: str):
    values = table.column(col)
    return "" if values and isinstance(values[0], str) else 0.0


def _join(left: Table, right: Table, on: Sequence[str], outer: bool) -> Table:
    lk = [left.columns.index(c) for c in on]
    rk = [right.columns.index(c) for c in on]
    lrest = [i for i, c in enumerate(left.columns) if c not in on]
    rrest = [i for i, c in enumerate(right.columns) if c not in on]
    columns = tuple(on) + tuple(left.columns[i] for i in lrest) + tuple(right.columns[i] for i in rrest)
    index: dict[tuple, tuple] = {}
    for r in right.rows:
        index.setdefault(tuple(r[i] for i in rk), r)
    lpad = tuple(_pad_value(left, left.columns[i]) for i in lrest)
    rpad = tuple(_pad_value(right, right.columns[i]) for i in rrest)
    out, matched = [], set()
    for r in left.rows:
        key = tuple(r[i] for i in lk)
        other = index.get(key)
        if other is not None:
            matched.add(key)
            out.append(key + tuple(r[i] for i in lrest) + tuple(other[i] for i in rrest))
        elif outer:
            out.append(key + tuple(r[i] for i in lrest) + rpad)
    if outer:
        seen = set()
        for r in right.rows:
            key = tuple(r[i] for i in rk)
            if key not in matched and key not in seen:
                seen.add(key)
                out.append(key + lpad + tuple(r[i] for i in rrest))
    return Table(columns, out)


def evaluate(stmt: SelectStmt, tables: Mapping[str, Table], release_prefix: str = "r",
             keys: Sequence[Sequence] | None = None, size_bound: float | None = None) -> list[ReleaseValue]:
    """Raw release values for one statement: one per declared key, or a single value.

    ``keys`` overrides the statement's WITH KEYS (the planner supplies enumerated time bins);
    ``size_bound`` is the fixed AVG/VAR denominator.
    """
    src = eval_rel(stmt.source, tables)
    rows = _dicts(src)
    if stmt.where is not None:
        rows = [r for r in rows if _truthy(eval_expr(stmt.where, r))]
    agg = stmt.aggregate
    keys = stmt.keys if keys is None else keys
    if agg.fn == "ARGMAX":
        if not keys:
            raise EvaluationError("ARGMAX needs declared keys")
        buckets = _group(rows, (agg.arg,), keys[:1])
        scores = tuple((k[0], float(len(g))) for k, g in buckets)
        best = max(range(len(scores)), key=lambda i: (scores[i][1], -i))
        return [ReleaseValue(release_prefix, None, float(best), not rows, scores)]
    if not stmt.group_by:
        value, empty = aggregate(agg, rows, size_bound)
        return [ReleaseValue(release_prefix, None, value, empty)]
    if keys is None:
        raise EvaluationError("top-level GROUP BY needs keys")
    out = []
    for key, grows in _group(rows, stmt.group_by, keys):
        value, empty = aggregate(agg, grows, size_bound)
        out.append(ReleaseValue(f"{release_prefix}[{','.join(_fmt_key(k) for k in key)}]", key, value, empty))
    return out


def _fmt_key(k) -> str:
    if isinstance(k, float) and k.is_integer():
        return str(int(k))
    return str(k)
