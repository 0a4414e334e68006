"""SPLIT / PROCESS / SELECT query language: AST, recursive-descent parser and pretty-printer."""

from __future__ import annotations

import datetime as _dt
import re
from dataclasses import dataclass
from typing import Union

AGGREGATES = ("COUNT", "SUM", "AVG", "VAR", "ARGMAX")
# stateless scalar functions an analyst may apply; hour/day bin the chunk timestamp
SCALAR_FUNCTIONS = ("range", "hour", "day", "abs", "floor", "ceil", "round", "sqrt", "lower", "upper", "length")
KEYWORDS = {
    "SELECT", "FROM", "WHERE", "GROUP", "BY", "WITH", "KEYS", "LIMIT", "JOIN", "OUTER", "ON", "UNION",
    "AS", "AND", "OR", "NOT", "CONSUMING", "SPLIT", "PROCESS", "BEGIN", "END", "TIME", "STRIDE",
    "REGION", "MASK", "INTO", "USING", "TIMEOUT", "PRODUCING", "ROWS", "SCHEMA",
}
# keywords that can follow an expression; the rest (e.g. REGION, TIME) remain usable as column names
CLAUSE_KEYWORDS = {"SELECT", "FROM", "WHERE", "GROUP", "BY", "WITH", "LIMIT", "JOIN", "OUTER", "ON", "UNION",
                   "AS", "AND", "OR", "NOT", "CONSUMING"}
DTYPES = ("STRING", "NUMBER")
_UNITS = {
    "ms": ("sec", 0.001), "msec": ("sec", 0.001),
    "s": ("sec", 1.0), "sec": ("sec", 1.0), "secs": ("sec", 1.0), "second": ("sec", 1.0), "seconds": ("sec", 1.0),
    "min": ("sec", 60.0), "mins": ("sec", 60.0), "minute": ("sec", 60.0), "minutes": ("sec", 60.0),
    "hr": ("sec", 3600.0), "hrs": ("sec", 3600.0), "hour": ("sec", 3600.0), "hours": ("sec", 3600.0),
    "frame": ("frame", 1.0), "frames": ("frame", 1.0),
}


class ParseError(ValueError):
    def __init__(self, message: str, pos: int, text: str = ""):
        self.pos = pos
        line = text.count("\n", 0, pos) + 1
        col = pos - (text.rfind("\n", 0, pos) + 1) + 1
        self.line, self.col = line, col
        super().__init__(f"{message} (at position {pos}, line {line} col {col})")


# ---------------------------------------------------------------- AST

@dataclass(frozen=True)
class Duration:
    value: float
    unit: str = "sec"  # "sec" or "frame"

    def frames(self, fps: int) -> float:
        return self.value if self.unit == "frame" else self.value * fps


@dataclass(frozen=True)
class Col:
    name: str


@dataclass(frozen=True)
class Lit:
    value: Union[float, str]


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "NOT"
    arg: "Expr"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


@dataclass(frozen=True)
class Agg:
    fn: str
    arg: "Expr | None" = None  # None means COUNT(*)


Expr = Union[Col, Lit, Unary, Binary, Call, Agg]


@dataclass(frozen=True)
class SelectItem:
    expr: Expr
    alias: str | None = None

    @property
    def name(self) -> str:
        return self.alias or expr_name(self.expr)


@dataclass(frozen=True)
class TableRef:
    name: str


@dataclass(frozen=True)
class SubSelect:
    items: tuple[SelectItem, ...]
    source: "Rel"
    where: Expr | None = None
    group_by: tuple[Expr, ...] = ()
    keys: tuple[tuple, ...] | None = None
    limit: int | None = None


@dataclass(frozen=True)
class Join:
    left: "Rel"
    right: "Rel"
    on: tuple[str, ...]
    outer: bool = False


@dataclass(frozen=True)
class Union_:
    left: "Rel"
    right: "Rel"


Rel = Union[TableRef, SubSelect, Join, Union_]


@dataclass(frozen=True)
class SplitStmt:
    camera_id: str
    begin: float
    end: float
    chunk: Duration
    stride: Duration
    name: str
    region_scheme: str | None = None
    mask: str | None = None


@dataclass(frozen=True)
class ColumnDef:
    name: str
    dtype: str
    default: Union[float, str]


@dataclass(frozen=True)
class ProcessStmt:
    source: str
    executable: str
    timeout: Duration
    max_rows: int
    schema: tuple[ColumnDef, ...]
    name: str


@dataclass(frozen=True)
class SelectStmt:
    """A release statement: one aggregation, optionally per GROUP BY key."""

    items: tuple[SelectItem, ...]
    source: Rel
    where: Expr | None = None
    group_by: tuple[Expr, ...] = ()
    keys: tuple[tuple, ...] | None = None
    epsilon: float | None = None

    @property
    def aggregate(self) -> Agg:
        return next(i.expr for i in self.items if isinstance(i.expr, Agg))


Statement = Union[SplitStmt, ProcessStmt, SelectStmt]


@dataclass(frozen=True)
class QueryPlan:
    statements: tuple[Statement, ...]

    @property
    def splits(self) -> list[SplitStmt]:
        return [s for s in self.statements if isinstance(s, SplitStmt)]

    @property
    def processes(self) -> list[ProcessStmt]:
        return [s for s in self.statements if isinstance(s, ProcessStmt)]

    @property
    def selects(self) -> list[SelectStmt]:
        return [s for s in self.statements if isinstance(s, SelectStmt)]


def expr_name(expr: Expr) -> str:
    """Default output column name for an unaliased select item."""
    if isinstance(expr, Col):
        return expr.name
    if isinstance(expr, Call) and expr.fn == "range" and expr.args:
        return expr_name(expr.args[0])
    if isinstance(expr, Agg):
        return expr.fn.lower() if expr.arg is None else f"{expr.fn.lower()}_{expr_name(expr.arg)}"
    if isinstance(expr, Call):
        inner = "_".join(expr_name(a) for a in expr.args)
        return f"{expr.fn}_{inner}" if inner else expr.fn
    return "expr"


def contains_agg(expr) -> bool:
    if isinstance(expr, Agg):
        return True
    if isinstance(expr, Unary):
        return contains_agg(expr.arg)
    if isinstance(expr, Binary):
        return contains_agg(expr.left) or contains_agg(expr.right)
    if isinstance(expr, Call):
        return any(contains_agg(a) for a in expr.args)
    return False


# ---------------------------------------------------------------- scanner

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+|/\*.*?\*/|--[^\n]*)
  | (?P<number>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<string>"(?:[^"\\]|\\.)*"|'(?:[^'\\]|\\.)*')
  | (?P<op><=|>=|!=|<>|[(),;\[\]:=*+\-/<>])
""", re.VERBOSE | re.DOTALL)


@dataclass(frozen=True)
class Token:
    kind: str  # number, ident, string, op, eof
    text: str
    pos: int

    def is_kw(self, *words: str) -> bool:
        return self.kind == "ident" and self.text.upper() in words


class _Scanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0
        self._peeked: Token | None = None

    def _skip_ws(self) -> None:
        while True:
            m = _TOKEN_RE.match(self.text, self.pos)
            if m and m.lastgroup == "ws":
                self.pos = m.end()
                continue
            if self.text.startswith("/*", self.pos):
                raise ParseError("unterminated comment", self.pos, self.text)
            return

    def peek(self) -> Token:
        if self._peeked is None:
            self._skip_ws()
            if self.pos >= len(self.text):
                self._peeked = Token("eof", "", self.pos)
            else:
                m = _TOKEN_RE.match(self.text, self.pos)
                if not m:
                    raise ParseError(f"unexpected character {self.text[self.pos]!r}", self.pos, self.text)
                self._peeked = Token(m.lastgroup, m.group(), self.pos)
        return self._peeked

    def next(self) -> Token:
        tok = self.peek()
        self._peeked = None
        self.pos = tok.pos + len(tok.text)
        return tok

    def raw_word(self, what: str) -> tuple[str, int]:
        """Read a whitespace-delimited word (timestamps, executable paths), honouring quotes."""
        if self._peeked is not None:
            self.pos = self._peeked.pos
            self._peeked = None
        self._skip_ws()
        start = self.pos
        if start < len(self.text) and self.text[start] in "\"'":
            tok = self.next()
            if tok.kind != "string":
                raise ParseError(f"expected {what}", start, self.text)
            return _unquote(tok.text), start
        m = re.compile(r"[^\s;]+").match(self.text, start)
        if not m:
            raise ParseError(f"expected {what}", start, self.text)
        self.pos = m.end()
        return m.group(), start


def _unquote(s: str) -> str:
    return re.sub(r"\\(.)", r"\1", s[1:-1])


_OWNER_ID = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.\-]*")
_US_STAMP = re.compile(r"^(\d{1,2})-(\d{1,2})-(\d{4})/(\d{1,2}):(\d{2})(?::(\d{2}))?\s*([aApP][mM])?$")


def parse_timestamp(word: str) -> float:
    """Epoch seconds from a number, ``MM-DD-YYYY/hh:mm[am|pm]`` or ISO-8601 (naive means UTC)."""
    try:
        return float(word)
    except ValueError:
        pass
    m = _US_STAMP.match(word)
    if m:
        month, day, year, hour, minute = (int(m.group(i)) for i in range(1, 6))
        second = int(m.group(6) or 0)
        ampm = (m.group(7) or "").lower()
        if ampm:
            if not 1 <= hour <= 12:
                raise ValueError(f"bad 12-hour clock value in {word!r}")
            hour = hour % 12 + (12 if ampm == "pm" else 0)
        stamp = _dt.datetime(year, month, day, hour, minute, second, tzinfo=_dt.timezone.utc)
        return stamp.timestamp()
    stamp = _dt.datetime.fromisoformat(word)
    if stamp.tzinfo is None:
        stamp = stamp.replace(tzinfo=_dt.timezone.utc)
    return stamp.timestamp()


# ---------------------------------------------------------------- parser

class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.sc = _Scanner(text)

    def error(self, msg: str, tok: Token | None = None) -> ParseError:
        tok = tok or self.sc.peek()
        found = "end of input" if tok.kind == "eof" else repr(tok.text)
        return ParseError(f"{msg}, found {found}", tok.pos, self.text)

    def expect_kw(self, *words: str) -> Token:
        tok = self.sc.peek()
        if not tok.is_kw(*words):
            raise self.error(f"expected {' or '.join(words)}")
        return self.sc.next()

    def accept_kw(self, *words: str) -> bool:
        if self.sc.peek().is_kw(*words):
            self.sc.next()
            return True
        return False

    def expect_op(self, op: str) -> Token:
        tok = self.sc.peek()
        if tok.kind != "op" or tok.text != op:
            raise self.error(f"expected {op!r}")
        return self.sc.next()

    def accept_op(self, op: str) -> bool:
        tok = self.sc.peek()
        if tok.kind == "op" and tok.text == op:
            self.sc.next()
            return True
        return False

    def ident(self, what: str = "identifier") -> str:
        tok = self.sc.peek()
        if tok.kind != "ident" or tok.text.upper() in KEYWORDS:
            raise self.error(f"expected {what}")
        return self.sc.next().text

    def owner_id(self, what: str) -> str:
        """Camera, mask and region-scheme ids are owner-chosen and may contain '-' and '.'."""
        word, pos = self.sc.raw_word(what)
        if not _OWNER_ID.fullmatch(word) or word.upper() in KEYWORDS:
            raise ParseError(f"expected {what}, found {word!r}", pos, self.text)
        return word

    def column(self, what: str = "column") -> str:
        tok = self.sc.peek()
        if tok.kind != "ident" or tok.text.upper() in CLAUSE_KEYWORDS:
            raise self.error(f"expected {what}")
        return self.sc.next().text

    def number(self, what: str = "number") -> float:
        neg = self.accept_op("-")
        tok = self.sc.peek()
        if tok.kind != "number":
            raise self.error(f"expected {what}")
        value = float(self.sc.next().text)
        return -value if neg else value

    def integer(self, what: str) -> int:
        tok = self.sc.peek()
        value = self.number(what)
        if value != int(value):
            raise self.error(f"expected integer {what}", tok)
        return int(value)

    def duration(self) -> Duration:
        value = self.number("duration")
        tok = self.sc.peek()
        unit = tok.text.lower() if tok.kind == "ident" else ""
        if unit not in _UNITS:
            raise self.error("expected duration unit (sec, min, hr, ms, frame)")
        self.sc.next()
        canon, scale = _UNITS[unit]
        return Duration(value * scale, canon)

    # -- statements
    def plan(self) -> QueryPlan:
        stmts: list[Statement] = []
        names: set[str] = set()
        if self.sc.peek().kind == "eof":
            raise self.error("empty query")
        while self.sc.peek().kind != "eof":
            if self.accept_op(";"):
                continue
            tok = self.sc.peek()
            if tok.is_kw("SPLIT"):
                stmt = self.split_stmt()
            elif tok.is_kw("PROCESS"):
                stmt = self.process_stmt()
            elif tok.is_kw("SELECT"):
                stmt = self.select_stmt()
            else:
                raise self.error("expected SPLIT, PROCESS or SELECT")
            if isinstance(stmt, (SplitStmt, ProcessStmt)):
                if stmt.name in names:
                    raise ParseError(f"duplicate statement name {stmt.name!r}", tok.pos, self.text)
                names.add(stmt.name)
            stmts.append(stmt)
            if self.sc.peek().kind != "eof":
                self.expect_op(";")
        return QueryPlan(tuple(stmts))

    def split_stmt(self) -> SplitStmt:
        self.expect_kw("SPLIT")
        camera = self.owner_id("camera id")
        self.expect_kw("BEGIN")
        begin = self.timestamp()
        self.expect_kw("END")
        end = self.timestamp()
        self.expect_kw("BY")
        self.expect_kw("TIME")
        chunk = self.duration()
        self.expect_kw("STRIDE")
        stride = self.duration()
        scheme = mask = None
        if self.sc.peek().is_kw("BY"):
            self.sc.next()
            self.expect_kw("REGION")
            scheme = self.owner_id("region scheme id")
        if self.accept_kw("WITH"):
            self.expect_kw("MASK")
            mask = self.owner_id("mask id")
        self.expect_kw("INTO")
        name = self.ident("chunk set name")
        return SplitStmt(camera, begin, end, chunk, stride, name, scheme, mask)

    def timestamp(self) -> float:
        word, pos = self.sc.raw_word("timestamp")
        try:
            return parse_timestamp(word)
        except ValueError as exc:
            raise ParseError(f"bad timestamp {word!r}: {exc}", pos, self.text) from None

    def process_stmt(self) -> ProcessStmt:
        self.expect_kw("PROCESS")
        source = self.ident("chunk set name")
        self.expect_kw("USING")
        exe, _ = self.sc.raw_word("executable")
        self.expect_kw("TIMEOUT")
        timeout = self.duration()
        self.expect_kw("PRODUCING")
        max_rows = self.integer("row count")
        self.expect_kw("ROWS")
        self.expect_kw("WITH")
        self.expect_kw("SCHEMA")
        self.expect_op("(")
        cols = [self.column_def()]
        while self.accept_op(","):
            cols.append(self.column_def())
        self.expect_op(")")
        self.expect_kw("INTO")
        name = self.ident("table name")
        return ProcessStmt(source, exe, timeout, max_rows, tuple(cols), name)

    def column_def(self) -> ColumnDef:
        name = self.column("column name")
        self.expect_op(":")
        tok = self.sc.peek()
        if not tok.is_kw(*DTYPES):
            raise self.error("expected STRING or NUMBER")
        dtype = self.sc.next().text.upper()
        default: float | str = "" if dtype == "STRING" else 0.0
        if self.accept_op("="):
            tok = self.sc.peek()
            if tok.kind == "string":
                default = _unquote(self.sc.next().text)
            else:
                default = self.number("default value")
        return ColumnDef(name, dtype, default)

    def select_stmt(self) -> SelectStmt:
        start = self.expect_kw("SELECT")
        items = self.select_items()
        self.expect_kw("FROM")
        source = self.relation()
        where = self.expr() if self.accept_kw("WHERE") else None
        group_by: tuple[Expr, ...] = ()
        keys = None
        if self.sc.peek().is_kw("GROUP"):
            group_by = self.group_clause()
        if self.sc.peek().is_kw("WITH"):
            keys = self.keys_clause()
        epsilon = self.number("budget") if self.accept_kw("CONSUMING") else None
        aggs = [i for i in items if isinstance(i.expr, Agg)]
        if len(aggs) != 1 or any(contains_agg(i.expr) for i in items if not isinstance(i.expr, Agg)):
            raise ParseError("a SELECT statement must end in exactly one aggregation "
                             "(COUNT, SUM, AVG, VAR or ARGMAX)", start.pos, self.text)
        for i in items:
            if not isinstance(i.expr, Agg) and i.expr not in group_by:
                raise ParseError(f"column {i.name!r} is neither aggregated nor grouped", start.pos, self.text)
        return SelectStmt(tuple(items), source, where, group_by, keys, epsilon)

    def select_items(self) -> list[SelectItem]:
        items = [self.select_item()]
        while self.accept_op(","):
            items.append(self.select_item())
        return items

    def select_item(self) -> SelectItem:
        expr = self.expr()
        alias = self.column("alias") if self.accept_kw("AS") else None
        return SelectItem(expr, alias)

    def group_clause(self) -> tuple[Expr, ...]:
        self.expect_kw("GROUP")
        self.expect_kw("BY")
        exprs = [self.expr()]
        while self.accept_op(","):
            exprs.append(self.expr())
        return tuple(exprs)

    def keys_clause(self) -> tuple[tuple, ...]:
        self.expect_kw("WITH")
        self.expect_kw("KEYS")
        lists = [self.key_list()]
        while self.accept_op(","):
            lists.append(self.key_list())
        return tuple(lists)

    def key_list(self) -> tuple:
        self.expect_op("[")
        values = []
        if not self.accept_op("]"):
            values.append(self.literal_value())
            while self.accept_op(","):
                values.append(self.literal_value())
            self.expect_op("]")
        return tuple(values)

    def literal_value(self):
        tok = self.sc.peek()
        if tok.kind == "string":
            return _unquote(self.sc.next().text)
        return self.number("key value")

    # -- relations
    def relation(self) -> Rel:
        rel = self.rel_primary()
        while True:
            tok = self.sc.peek()
            if tok.is_kw("JOIN", "OUTER"):
                outer = self.accept_kw("OUTER")
                self.expect_kw("JOIN")
                right = self.rel_primary()
                self.expect_kw("ON")
                on = [self.column("join column")]
                while self.accept_op(","):
                    on.append(self.column("join column"))
                rel = Join(rel, right, tuple(on), outer)
            elif tok.is_kw("UNION"):
                self.sc.next()
                rel = Union_(rel, self.rel_primary())
            else:
                return rel

    def rel_primary(self) -> Rel:
        if self.accept_op("("):
            if self.sc.peek().is_kw("SELECT"):
                rel = self.sub_select()
            else:
                rel = self.relation()
            self.expect_op(")")
            return rel
        return TableRef(self.ident("table name"))

    def sub_select(self) -> SubSelect:
        self.expect_kw("SELECT")
        items = self.select_items()
        self.expect_kw("FROM")
        source = self.relation()
        where = self.expr() if self.accept_kw("WHERE") else None
        group_by: tuple[Expr, ...] = ()
        keys = None
        if self.sc.peek().is_kw("GROUP"):
            group_by = self.group_clause()
            if self.sc.peek().is_kw("WITH"):
                keys = self.keys_clause()
        limit = self.integer("limit") if self.accept_kw("LIMIT") else None
        return SubSelect(tuple(items), source, where, group_by, keys, limit)

    # -- expressions, lowest precedence first
    def expr(self) -> Expr:
        left = self.and_expr()
        while self.accept_kw("OR"):
            left = Binary("OR", left, self.and_expr())
        return left

    def and_expr(self) -> Expr:
        left = self.not_expr()
        while self.accept_kw("AND"):
            left = Binary("AND", left, self.not_expr())
        return left

    def not_expr(self) -> Expr:
        if self.accept_kw("NOT"):
            return Unary("NOT", self.not_expr())
        return self.comparison()

    def comparison(self) -> Expr:
        left = self.additive()
        tok = self.sc.peek()
        if tok.kind == "op" and tok.text in ("=", "!=", "<>", "<", "<=", ">", ">="):
            self.sc.next()
            op = "!=" if tok.text == "<>" else tok.text
            return Binary(op, left, self.additive())
        return left

    def additive(self) -> Expr:
        left = self.term()
        while True:
            tok = self.sc.peek()
            if tok.kind == "op" and tok.text in "+-":
                self.sc.next()
                left = Binary(tok.text, left, self.term())
            else:
                return left

    def term(self) -> Expr:
        left = self.factor()
        while True:
            tok = self.sc.peek()
            if tok.kind == "op" and tok.text in "*/":
                self.sc.next()
                left = Binary(tok.text, left, self.factor())
            else:
                return left

    def factor(self) -> Expr:
        tok = self.sc.peek()
        if tok.kind == "op" and tok.text == "-":
            self.sc.next()
            nxt = self.sc.peek()
            if nxt.kind == "number":
                return Lit(-float(self.sc.next().text))
            return Unary("-", self.factor())
        if tok.kind == "number":
            return Lit(float(self.sc.next().text))
        if tok.kind == "string":
            return Lit(_unquote(self.sc.next().text))
        if tok.kind == "op" and tok.text == "(":
            self.sc.next()
            inner = self.expr()
            self.expect_op(")")
            return inner
        if tok.kind == "ident":
            upper = tok.text.upper()
            if upper in AGGREGATES:
                self.sc.next()
                self.expect_op("(")
                if upper == "COUNT" and self.accept_op("*"):
                    arg = None
                else:
                    arg = self.expr()
                self.expect_op(")")
                return Agg(upper, arg)
            name = self.column("column or function")
            if self.accept_op("("):
                fn = name.lower()
                if fn not in SCALAR_FUNCTIONS:
                    raise ParseError(f"unknown function {name!r}", tok.pos, self.text)
                args = []
                if not self.accept_op(")"):
                    args.append(self.expr())
                    while self.accept_op(","):
                        args.append(self.expr())
                    self.expect_op(")")
                return Call(fn, tuple(args))
            return Col(name)
        raise self.error("expected expression")


def parse_query(text: str) -> QueryPlan:
    """Parse query text into a plan; names are resolved later by validation."""
    return _Parser(text).plan()


# ---------------------------------------------------------------- pretty-printer

def _num(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _lit(v) -> str:
    return _str(v) if isinstance(v, str) else _num(v)


def format_expr(e: Expr) -> str:
    if isinstance(e, Col):
        return e.name
    if isinstance(e, Lit):
        return _lit(e.value)
    if isinstance(e, Unary):
        return f"(NOT {format_expr(e.arg)})" if e.op == "NOT" else f"(-{format_expr(e.arg)})"
    if isinstance(e, Binary):
        return f"({format_expr(e.left)} {e.op} {format_expr(e.right)})"
    if isinstance(e, Call):
        return f"{e.fn}({', '.join(format_expr(a) for a in e.args)})"
    if isinstance(e, Agg):
        return f"{e.fn}({'*' if e.arg is None else format_expr(e.arg)})"
    raise TypeError(f"not an expression: {e!r}")


def _items(items) -> str:
    return ", ".join(format_expr(i.expr) + (f" AS {i.alias}" if i.alias else "") for i in items)


def _keys(keys) -> str:
    return ", ".join("[" + ", ".join(_lit(v) for v in ks) + "]" for ks in keys)


def _rel_primary(r: Rel) -> str:
    return r.name if isinstance(r, TableRef) else f"({format_rel(r)})"


def format_rel(r: Rel) -> str:
    if isinstance(r, TableRef):
        return r.name
    if isinstance(r, Join):
        kw = "OUTER JOIN" if r.outer else "JOIN"
        return f"{_rel_primary(r.left)} {kw} {_rel_primary(r.right)} ON {', '.join(r.on)}"
    if isinstance(r, Union_):
        return f"{_rel_primary(r.left)} UNION {_rel_primary(r.right)}"
    parts = [f"SELECT {_items(r.items)} FROM {_rel_primary(r.source)}"]
    if r.where is not None:
        parts.append(f"WHERE {format_expr(r.where)}")
    if r.group_by:
        parts.append("GROUP BY " + ", ".join(format_expr(g) for g in r.group_by))
        if r.keys is not None:
            parts.append(f"WITH KEYS {_keys(r.keys)}")
    if r.limit is not None:
        parts.append(f"LIMIT {r.limit}")
    return " ".join(parts)


def _duration(d: Duration) -> str:
    return f"{_num(d.value)}{d.unit}"


def format_statement(s: Statement) -> str:
    if isinstance(s, SplitStmt):
        text = (f"SPLIT {s.camera_id} BEGIN {_num(s.begin)} END {_num(s.end)} "
                f"BY TIME {_duration(s.chunk)} STRIDE {_duration(s.stride)}")
        if s.region_scheme:
            text += f" BY REGION {s.region_scheme}"
        if s.mask:
            text += f" WITH MASK {s.mask}"
        return text + f" INTO {s.name}"
    if isinstance(s, ProcessStmt):
        cols = ", ".join(f"{c.name}:{c.dtype}={_lit(c.default)}" for c in s.schema)
        exe = s.executable if re.fullmatch(r"[^\s;\"']+", s.executable) else _str(s.executable)
        return (f"PROCESS {s.source} USING {exe} TIMEOUT {_duration(s.timeout)} "
                f"PRODUCING {s.max_rows} ROWS WITH SCHEMA ({cols}) INTO {s.name}")
    parts = [f"SELECT {_items(s.items)} FROM {_rel_primary(s.source)}"]
    if s.where is not None:
        parts.append(f"WHERE {format_expr(s.where)}")
    if s.group_by:
        parts.append("GROUP BY " + ", ".join(format_expr(g) for g in s.group_by))
    if s.keys is not None:
        parts.append(f"WITH KEYS {_keys(s.keys)}")
    if s.epsilon is not None:
        parts.append(f"CONSUMING {_num(s.epsilon)}")
    return " ".join(parts)


def format_plan(plan: QueryPlan) -> str:
    return "".join(format_statement(s) + ";\n" for s in plan.statements)
