"""Parser, renderer and determinism rewriter for the supported SQL subset.

Statements are resolved against a :class:`SchemaCatalog` at parse time so that
every column reference is table-qualified before read/write-set extraction.
See ``docs/grammar.md`` for the accepted grammar.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence, Union


class ParseError(Exception):
    """Base class for parse-time failures."""


class SQLSyntaxError(ParseError):
    pass


class UnknownTable(ParseError):
    pass


class UnknownColumn(ParseError):
    pass


class ArityMismatch(ParseError):
    pass


class CatalogError(Exception):
    pass


class StatementKind(Enum):
    SELECT = "SelectRead"
    INSERT = "Insert"
    UPDATE = "Update"
    DELETE = "Delete"
    BEGIN = "Begin"
    COMMIT = "Commit"
    ROLLBACK = "Rollback"
    CREATE_TABLE = "CreateTable"

    @property
    def is_write(self) -> bool:
        return self in (StatementKind.INSERT, StatementKind.UPDATE,
                        StatementKind.DELETE, StatementKind.CREATE_TABLE)

    @property
    def is_control(self) -> bool:
        return self in (StatementKind.BEGIN, StatementKind.COMMIT, StatementKind.ROLLBACK)


COLUMN_TYPES = ("int", "float", "text")


@dataclass(frozen=True)
class TableSchema:
    name: str
    columns: tuple[str, ...]
    primary_key: str
    types: tuple[str, ...]

    def __post_init__(self):
        if len(self.columns) != len(self.types):
            raise CatalogError(f"{self.name}: column/type count mismatch")
        lowered = [c.lower() for c in self.columns]
        if len(set(lowered)) != len(lowered):
            raise CatalogError(f"{self.name}: duplicate column names")
        if self.primary_key not in self.columns:
            raise CatalogError(f"{self.name}: primary key {self.primary_key} is not a column")
        for t in self.types:
            if t not in COLUMN_TYPES:
                raise CatalogError(f"{self.name}: unsupported column type {t!r}")

    def column_type(self, column: str) -> str:
        return self.types[self.columns.index(column)]

    def resolve(self, name: str) -> Optional[str]:
        low = name.lower()
        for c in self.columns:
            if c.lower() == low:
                return c
        return None

    @property
    def pk_index(self) -> int:
        return self.columns.index(self.primary_key)


class SchemaCatalog:
    """Table declarations keyed case-insensitively."""

    def __init__(self, tables: Iterable[TableSchema] = ()):
        self._tables: dict[str, TableSchema] = {}
        for t in tables:
            self.add(t)

    def add(self, schema: TableSchema) -> None:
        key = schema.name.lower()
        if key in self._tables:
            raise CatalogError(f"table {schema.name} already declared")
        self._tables[key] = schema

    def get(self, name: str) -> TableSchema:
        try:
            return self._tables[name.lower()]
        except KeyError:
            raise UnknownTable(name) from None

    def __contains__(self, name: str) -> bool:
        return name.lower() in self._tables

    def __iter__(self):
        return iter(self._tables.values())

    def __len__(self) -> int:
        return len(self._tables)

    def copy(self) -> "SchemaCatalog":
        return SchemaCatalog(self._tables.values())

    def __eq__(self, other) -> bool:
        return isinstance(other, SchemaCatalog) and list(self) == list(other)

    def __repr__(self) -> str:
        return f"SchemaCatalog({[t.name for t in self]})"


# ---------------------------------------------------------------------------
# statement values

@dataclass(frozen=True)
class Placeholder:
    index: int


@dataclass(frozen=True)
class Macro:
    name: str  # NOW | RAND


Literal = Union[int, float, str, None]
Value = Union[int, float, str, None, Placeholder, Macro]


@dataclass(frozen=True)
class ColumnRef:
    table: str
    column: str

    @property
    def qualified(self) -> str:
        return f"{self.table}.{self.column}"

    def __str__(self) -> str:
        return self.qualified


STAR = "*"


@dataclass(frozen=True)
class Aggregate:
    func: str  # COUNT | SUM
    arg: Union[ColumnRef, str]  # ColumnRef or STAR


Projection = Union[ColumnRef, Aggregate, str]

COMPARATORS = ("=", "<>", "<=", ">=", "<", ">")


@dataclass(frozen=True)
class Atom:
    column: ColumnRef
    op: str
    value: Value


@dataclass(frozen=True)
class Statement:
    kind: StatementKind
    target_tables: tuple[str, ...] = ()
    projections: tuple[Projection, ...] = ()
    predicate: tuple[Atom, ...] = ()
    set_clauses: tuple[tuple[ColumnRef, Value], ...] = ()
    values: tuple[Value, ...] = ()
    join_spec: Optional[tuple[ColumnRef, ColumnRef]] = None
    create: Optional[TableSchema] = None
    text: str = field(default="", compare=False)

    @property
    def is_read(self) -> bool:
        return self.kind is StatementKind.SELECT

    @property
    def is_write(self) -> bool:
        return self.kind.is_write

    @property
    def has_star(self) -> bool:
        return STAR in self.projections

    def all_values(self) -> list[Value]:
        out: list[Value] = [v for _, v in self.set_clauses]
        out.extend(self.values)
        out.extend(a.value for a in self.predicate)
        return out

    @property
    def is_bound(self) -> bool:
        return not any(isinstance(v, Placeholder) for v in self.all_values())

    @property
    def is_deterministic(self) -> bool:
        return not any(isinstance(v, Macro) for v in self.all_values())

    def __str__(self) -> str:
        return render(self)


# ---------------------------------------------------------------------------
# tokenizer

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>-?\d+\.\d*(?:[eE][-+]?\d+)?|-?\d+[eE][-+]?\d+|-?\.\d+|-?\d+)
  | (?P<str>'(?:[^']|'')*')
  | (?P<op><>|!=|<=|>=|=|<|>)
  | (?P<punct>[(),*;?.])
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
""", re.VERBOSE)

KEYWORDS = {
    "SELECT", "FROM", "WHERE", "AND", "OR", "NOT", "JOIN", "INNER", "ON", "INSERT",
    "INTO", "VALUES", "UPDATE", "SET", "DELETE", "BEGIN", "COMMIT", "ROLLBACK",
    "CREATE", "TABLE", "PRIMARY", "KEY", "NULL", "COUNT", "SUM", "NOW",
    "CURRENT_TIMESTAMP", "RAND", "START", "TRANSACTION", "WORK", "GROUP", "ORDER",
    "LIMIT", "UNION", "LEFT", "RIGHT", "OUTER", "AS", "IN", "LIKE", "BETWEEN",
}


@dataclass
class _Tok:
    kind: str
    text: str
    pos: int

    @property
    def upper(self) -> str:
        return self.text.upper()


def _tokenize(sql: str) -> list[_Tok]:
    toks: list[_Tok] = []
    pos = 0
    while pos < len(sql):
        m = _TOKEN_RE.match(sql, pos)
        if m is None:
            raise SQLSyntaxError(f"unexpected character {sql[pos]!r} at {pos}")
        kind = m.lastgroup
        if kind != "ws":
            text = m.group()
            if kind == "ident" and text.upper() in KEYWORDS:
                kind = "kw"
            toks.append(_Tok(kind, text, pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(sql)))
    return toks


class _Parser:
    def __init__(self, sql: str, catalog: SchemaCatalog):
        self.sql = sql
        self.catalog = catalog
        self.toks = _tokenize(sql)
        self.i = 0
        self.nparams = 0

    # -- token helpers
    def peek(self, ahead: int = 0) -> _Tok:
        return self.toks[min(self.i + ahead, len(self.toks) - 1)]

    def next(self) -> _Tok:
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def at_kw(self, *words: str) -> bool:
        t = self.peek()
        return t.kind == "kw" and t.upper in words

    def accept_kw(self, *words: str) -> bool:
        if self.at_kw(*words):
            self.i += 1
            return True
        return False

    def expect_kw(self, word: str) -> None:
        if not self.accept_kw(word):
            self.fail(f"expected {word}")

    def accept_punct(self, ch: str) -> bool:
        t = self.peek()
        if t.kind == "punct" and t.text == ch:
            self.i += 1
            return True
        return False

    def expect_punct(self, ch: str) -> None:
        if not self.accept_punct(ch):
            self.fail(f"expected {ch!r}")

    def fail(self, msg: str):
        t = self.peek()
        near = t.text or "end of input"
        raise SQLSyntaxError(f"{msg} near {near!r} at {t.pos}")

    def ident(self) -> str:
        t = self.next()
        if t.kind != "ident":
            self.i -= 1
            self.fail("expected identifier")
        return t.text

    # -- entry
    def statement(self) -> Statement:
        t = self.peek()
        if t.kind != "kw":
            self.fail("expected statement keyword")
        word = t.upper
        if word == "SELECT":
            stmt = self.select()
        elif word == "INSERT":
            stmt = self.insert()
        elif word == "UPDATE":
            stmt = self.update()
        elif word == "DELETE":
            stmt = self.delete()
        elif word in ("BEGIN", "START"):
            self.next()
            if word == "START":
                self.expect_kw("TRANSACTION")
            else:
                self.accept_kw("TRANSACTION", "WORK")
            stmt = Statement(StatementKind.BEGIN)
        elif word == "COMMIT":
            self.next()
            self.accept_kw("TRANSACTION", "WORK")
            stmt = Statement(StatementKind.COMMIT)
        elif word == "ROLLBACK":
            self.next()
            self.accept_kw("TRANSACTION", "WORK")
            stmt = Statement(StatementKind.ROLLBACK)
        elif word == "CREATE":
            stmt = self.create_table()
        else:
            self.fail(f"unsupported statement {word}")
        self.accept_punct(";")
        if self.peek().kind != "eof":
            self.fail("unexpected trailing input")
        return replace(stmt, text=self.sql)

    # -- column resolution
    def table(self) -> str:
        name = self.ident()
        return self.catalog.get(name).name

    def column(self, tables: Sequence[str]) -> ColumnRef:
        first = self.ident()
        if self.accept_punct("."):
            second = self.ident()
            tname = None
            for t in tables:
                if t.lower() == first.lower():
                    tname = t
            if tname is None:
                raise UnknownTable(f"{first} is not a target table")
            col = self.catalog.get(tname).resolve(second)
            if col is None:
                raise UnknownColumn(f"{tname}.{second}")
            return ColumnRef(tname, col)
        hits = []
        for t in tables:
            col = self.catalog.get(t).resolve(first)
            if col is not None:
                hits.append(ColumnRef(t, col))
        if not hits:
            raise UnknownColumn(first)
        if len(hits) > 1:
            raise SQLSyntaxError(f"ambiguous column {first}")
        return hits[0]

    def value(self) -> Value:
        t = self.next()
        if t.kind == "num":
            return float(t.text) if any(c in t.text for c in ".eE") else int(t.text)
        if t.kind == "str":
            return t.text[1:-1].replace("''", "'")
        if t.kind == "punct" and t.text == "?":
            v = Placeholder(self.nparams)
            self.nparams += 1
            return v
        if t.kind == "kw":
            word = t.upper
            if word == "NULL":
                return None
            if word == "CURRENT_TIMESTAMP":
                return Macro("NOW")
            if word in ("NOW", "RAND"):
                self.expect_punct("(")
                self.expect_punct(")")
                return Macro(word)
        self.i -= 1
        self.fail("expected literal, placeholder or macro")

    def predicate(self, tables: Sequence[str]) -> tuple[Atom, ...]:
        atoms = [self.atom(tables)]
        while self.accept_kw("AND"):
            atoms.append(self.atom(tables))
        if self.at_kw("OR"):
            self.fail("OR is not supported; predicates must be conjunctive")
        return tuple(atoms)

    def atom(self, tables: Sequence[str]) -> Atom:
        if self.at_kw("NOT"):
            self.fail("NOT is not supported")
        if self.accept_punct("("):
            self.fail("parenthesised predicates and subqueries are not supported")
        col = self.column(tables)
        t = self.next()
        if t.kind != "op":
            self.i -= 1
            self.fail("expected comparator")
        op = "<>" if t.text == "!=" else t.text
        if self.peek().kind == "punct" and self.peek().text == "(":
            self.fail("subqueries are not supported")
        return Atom(col, op, self.value())

    # -- statements
    def select(self) -> Statement:
        self.expect_kw("SELECT")
        # projections are resolved after FROM is known
        start = self.i
        depth = 0
        while not (self.at_kw("FROM") and depth == 0):
            t = self.next()
            if t.kind == "eof":
                self.fail("expected FROM")
            if t.kind == "kw" and t.upper == "SELECT":
                self.fail("subqueries are not supported")
            if t.kind == "punct" and t.text == "(":
                depth += 1
            elif t.kind == "punct" and t.text == ")":
                depth -= 1
        proj_end = self.i
        self.expect_kw("FROM")
        tables = [self.table()]
        join = None
        if self.accept_kw("INNER"):
            if not self.at_kw("JOIN"):
                self.fail("expected JOIN")
        if self.at_kw("LEFT", "RIGHT", "OUTER"):
            self.fail("outer joins are not supported")
        if self.accept_punct(","):
            self.fail("implicit cross joins are not supported")
        if self.accept_kw("JOIN"):
            other = self.table()
            if other == tables[0]:
                self.fail("self joins are not supported")
            tables.append(other)
            self.expect_kw("ON")
            left = self.column(tables)
            t = self.next()
            if t.kind != "op" or t.text != "=":
                self.i -= 1
                self.fail("join condition must be an equality")
            right = self.column(tables)
            if left.table == right.table:
                self.fail("join condition must relate the two tables")
            join = (left, right)
        pred: tuple[Atom, ...] = ()
        if self.accept_kw("WHERE"):
            pred = self.predicate(tables)
        if self.at_kw("GROUP", "ORDER", "LIMIT", "UNION"):
            self.fail(f"{self.peek().upper} is not supported")
        end = self.i
        self.i = start
        projections = self.projections(tables, proj_end)
        self.i = end
        return Statement(StatementKind.SELECT, tuple(tables), projections, pred, join_spec=join)

    def projections(self, tables: Sequence[str], stop: int) -> tuple[Projection, ...]:
        if self.accept_punct("*"):
            if self.i != stop:
                self.fail("'*' cannot be combined with other projections")
            return (STAR,)
        items: list[Projection] = []
        while True:
            if self.at_kw("COUNT", "SUM"):
                func = self.next().upper
                self.expect_punct("(")
                if func == "COUNT" and self.accept_punct("*"):
                    arg: Union[ColumnRef, str] = STAR
                else:
                    arg = self.column(tables)
                self.expect_punct(")")
                items.append(Aggregate(func, arg))
            else:
                items.append(self.column(tables))
            if self.i == stop:
                break
            self.expect_punct(",")
        if any(isinstance(p, Aggregate) for p in items) and not all(
                isinstance(p, Aggregate) for p in items):
            self.fail("mixing aggregates and columns requires GROUP BY, which is not supported")
        return tuple(items)

    def insert(self) -> Statement:
        self.expect_kw("INSERT")
        self.expect_kw("INTO")
        tname = self.table()
        schema = self.catalog.get(tname)
        cols: Optional[list[str]] = None
        if self.accept_punct("("):
            cols = [self.column([tname]).column]
            while self.accept_punct(","):
                cols.append(self.column([tname]).column)
            self.expect_punct(")")
        self.expect_kw("VALUES")
        self.expect_punct("(")
        vals = [self.value()]
        while self.accept_punct(","):
            vals.append(self.value())
        self.expect_punct(")")
        if self.accept_punct(","):
            self.fail("multi-row inserts are not supported")
        if cols is not None:
            if len(cols) != len(vals):
                raise ArityMismatch(f"{len(cols)} columns but {len(vals)} values")
            if sorted(cols) != sorted(schema.columns):
                raise ArityMismatch(f"insert must supply every column of {tname}")
            vals = [vals[cols.index(c)] for c in schema.columns]
        if len(vals) != len(schema.columns):
            raise ArityMismatch(
                f"{tname} declares {len(schema.columns)} columns, got {len(vals)} values")
        return Statement(StatementKind.INSERT, (tname,), values=tuple(vals))

    def update(self) -> Statement:
        self.expect_kw("UPDATE")
        tname = self.table()
        schema = self.catalog.get(tname)
        self.expect_kw("SET")
        sets = []
        while True:
            col = self.column([tname])
            t = self.next()
            if t.kind != "op" or t.text != "=":
                self.i -= 1
                self.fail("expected '=' in SET clause")
            if col.column == schema.primary_key:
                raise SQLSyntaxError("updating the primary key column is not supported")
            sets.append((col, self.value()))
            if not self.accept_punct(","):
                break
        if len({c for c, _ in sets}) != len(sets):
            self.fail("column assigned twice")
        pred: tuple[Atom, ...] = ()
        if self.accept_kw("WHERE"):
            pred = self.predicate([tname])
        return Statement(StatementKind.UPDATE, (tname,), predicate=pred, set_clauses=tuple(sets))

    def delete(self) -> Statement:
        self.expect_kw("DELETE")
        self.expect_kw("FROM")
        tname = self.table()
        pred: tuple[Atom, ...] = ()
        if self.accept_kw("WHERE"):
            pred = self.predicate([tname])
        return Statement(StatementKind.DELETE, (tname,), predicate=pred)

    def create_table(self) -> Statement:
        self.expect_kw("CREATE")
        self.expect_kw("TABLE")
        name = self.ident()
        if name in self.catalog:
            raise CatalogError(f"table {name} already exists")
        self.expect_punct("(")
        cols: list[str] = []
        types: list[str] = []
        pk: Optional[str] = None
        while True:
            if self.accept_kw("PRIMARY"):
                self.expect_kw("KEY")
                self.expect_punct("(")
                key = self.ident()
                self.expect_punct(")")
                if pk is not None:
                    self.fail("multiple primary keys")
                pk = next((c for c in cols if c.lower() == key.lower()), key)
            else:
                cname = self.ident()
                tname = self.ident().lower()
                if tname in ("integer", "bigint"):
                    tname = "int"
                elif tname in ("real", "double", "numeric"):
                    tname = "float"
                elif tname in ("varchar", "char", "string"):
                    tname = "text"
                    if self.accept_punct("("):
                        self.next()
                        self.expect_punct(")")
                if tname not in COLUMN_TYPES:
                    self.fail(f"unsupported column type {tname}")
                cols.append(cname)
                types.append(tname)
                if self.accept_kw("PRIMARY"):
                    self.expect_kw("KEY")
                    if pk is not None:
                        self.fail("multiple primary keys")
                    pk = cname
            if not self.accept_punct(","):
                break
        self.expect_punct(")")
        if pk is None:
            self.fail("a primary key is required")
        schema = TableSchema(name, tuple(cols), pk, tuple(types))
        return Statement(StatementKind.CREATE_TABLE, (name,), create=schema)


def parse(sql: str, catalog: SchemaCatalog) -> Statement:
    """Parse one statement of the supported grammar, resolving names against *catalog*."""
    return _Parser(sql, catalog).statement()


# ---------------------------------------------------------------------------
# rendering

def render_literal(value: Value) -> str:
    if isinstance(value, Placeholder):
        return "?"
    if isinstance(value, Macro):
        return f"{value.name}()"
    if value is None:
        return "NULL"
    if isinstance(value, bool):
        raise TypeError("boolean literals are not supported")
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        if text in ("inf", "-inf", "nan"):
            raise ValueError(f"cannot render {text}")
        return text if any(c in text for c in ".eE") else text + ".0"
    return "'" + str(value).replace("'", "''") + "'"


def render(stmt: Statement) -> str:
    """Canonical text: uppercase keywords, single spaces, literals as typed."""
    kind = stmt.kind
    if kind.is_control:
        return {StatementKind.BEGIN: "BEGIN", StatementKind.COMMIT: "COMMIT",
                StatementKind.ROLLBACK: "ROLLBACK"}[kind]
    qualify = len(stmt.target_tables) > 1

    def col(c: ColumnRef) -> str:
        return c.qualified if qualify else c.column

    def where() -> str:
        if not stmt.predicate:
            return ""
        parts = [f"{col(a.column)} {a.op} {render_literal(a.value)}" for a in stmt.predicate]
        return " WHERE " + " AND ".join(parts)

    if kind is StatementKind.SELECT:
        items = []
        for p in stmt.projections:
            if p == STAR:
                items.append("*")
            elif isinstance(p, Aggregate):
                arg = "*" if p.arg == STAR else col(p.arg)
                items.append(f"{p.func}({arg})")
            else:
                items.append(col(p))
        text = f"SELECT {', '.join(items)} FROM {stmt.target_tables[0]}"
        if stmt.join_spec is not None:
            left, right = stmt.join_spec
            text += f" JOIN {stmt.target_tables[1]} ON {col(left)} = {col(right)}"
        return text + where()
    if kind is StatementKind.INSERT:
        vals = ", ".join(render_literal(v) for v in stmt.values)
        return f"INSERT INTO {stmt.target_tables[0]} VALUES ({vals})"
    if kind is StatementKind.UPDATE:
        sets = ", ".join(f"{col(c)} = {render_literal(v)}" for c, v in stmt.set_clauses)
        return f"UPDATE {stmt.target_tables[0]} SET {sets}" + where()
    if kind is StatementKind.DELETE:
        return f"DELETE FROM {stmt.target_tables[0]}" + where()
    schema = stmt.create
    defs = []
    for c, t in zip(schema.columns, schema.types):
        defs.append(f"{c} {t.upper()}" + (" PRIMARY KEY" if c == schema.primary_key else ""))
    return f"CREATE TABLE {schema.name} ({', '.join(defs)})"


# ---------------------------------------------------------------------------
# binding and determinism rewriting

class UnboundPlaceholder(Exception):
    pass


def _map_values(stmt: Statement, fn: Callable[[Value], Value]) -> Statement:
    # textual order: SET / VALUES precede WHERE
    sets = tuple((c, fn(v)) for c, v in stmt.set_clauses)
    vals = tuple(fn(v) for v in stmt.values)
    pred = tuple(Atom(a.column, a.op, fn(a.value)) for a in stmt.predicate)
    out = replace(stmt, predicate=pred, set_clauses=sets, values=vals)
    return replace(out, text=render(out))


def bind(stmt: Statement, params: Sequence[Literal]) -> Statement:
    """Substitute positional ``?`` placeholders with literal values."""
    count = sum(isinstance(v, Placeholder) for v in stmt.all_values())
    if count != len(params):
        raise UnboundPlaceholder(f"statement has {count} placeholders, got {len(params)} values")
    if count == 0:
        return stmt

    def sub(v: Value) -> Value:
        return params[v.index] if isinstance(v, Placeholder) else v

    return _map_values(stmt, sub)


def rewrite_nondeterministic(stmt: Statement, clock: Callable[[], Literal], rng) -> Statement:
    """Replace NOW()/CURRENT_TIMESTAMP and RAND() with concrete literals.

    The clock is sampled once per statement; each RAND() occurrence takes the
    next draw of ``rng`` (a ``random.Random``) in textual order.
    """
    if stmt.is_deterministic:
        return stmt
    now: list[Literal] = []

    def sub(v: Value) -> Value:
        if isinstance(v, Macro):
            if v.name == "NOW":
                if not now:
                    now.append(clock())
                return now[0]
            return rng.random()
        return v

    return _map_values(stmt, sub)
