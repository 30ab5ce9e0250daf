"""Table/column/row read-write sets, affecting classes and write independence.

Every set is a counter map so that the combined state of several transactions
can be built with :func:`merge` and taken apart again with :func:`remove`.
Columns are keyed table-qualified (``"R.A3"``); rows are ``(pk_column, value)``
pairs.  Access to all columns of a table is tracked with a separate star
counter instead of expanding to the declared columns.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

from .sqlparse import (STAR, Aggregate, ColumnRef, SchemaCatalog, Statement,
                       StatementKind, UnboundPlaceholder, render_literal)


class AffectingClass(Enum):
    RAS = 1
    CAS = 2
    TAS = 3

    def __lt__(self, other):
        return self.value < other.value


class Granularity(Enum):
    """How fine-grained extraction is allowed to be."""

    TAS = "tas"
    CAS = "cas"
    ALL = "all"


class UnderflowViolation(Exception):
    """Raised when removing a state that was never merged in."""


def _nested() -> dict:
    return {}


@dataclass
class RWSet:
    table_read: Counter = field(default_factory=Counter)
    table_write: Counter = field(default_factory=Counter)
    col_read: dict = field(default_factory=_nested)
    col_write: dict = field(default_factory=_nested)
    row_read: dict = field(default_factory=_nested)
    row_write: dict = field(default_factory=_nested)
    star_read: Counter = field(default_factory=Counter)
    star_write: Counter = field(default_factory=Counter)
    # multiset of constituent per-table classes; the effective class is derived
    classes: dict = field(default_factory=_nested)

    # -- derived views
    def class_of(self, table: str) -> AffectingClass | None:
        counts = self.classes.get(table)
        if not counts:
            return None
        if len(counts) == 1:
            return next(iter(counts))
        return AffectingClass.TAS

    @property
    def class_per_table(self) -> dict[str, AffectingClass]:
        return {t: self.class_of(t) for t in sorted(self.classes)}

    @property
    def tables(self) -> set[str]:
        return set(self.table_read) | set(self.table_write)

    @property
    def write_tables(self) -> set[str]:
        return set(self.table_write)

    def is_empty(self) -> bool:
        return not (self.table_read or self.table_write)

    def cols_read(self, table: str) -> set[str]:
        return set(self.col_read.get(table, ()))

    def cols_written(self, table: str) -> set[str]:
        return set(self.col_write.get(table, ()))

    def rows_read(self, table: str) -> set:
        return set(self.row_read.get(table, ()))

    def rows_written(self, table: str) -> set:
        return set(self.row_write.get(table, ()))

    def copy(self) -> "RWSet":
        out = RWSet()
        merge_into(out, self)
        return out

    def check_invariants(self) -> None:
        for name in ("table_read", "table_write", "star_read", "star_write"):
            assert all(v >= 1 for v in getattr(self, name).values()), name
        for name in ("col_read", "col_write", "row_read", "row_write", "classes"):
            for t, cnt in getattr(self, name).items():
                assert cnt, f"{name}[{t}] empty"
                assert all(v >= 1 for v in cnt.values()), f"{name}[{t}]"
        assert set(self.classes) == self.tables
        for t in self.tables:
            cls = self.class_of(t)
            if cls is AffectingClass.TAS and len(self.classes[t]) == 1:
                assert self.star_read[t] or self.star_write[t], f"TAS on {t} without star"


# ---------------------------------------------------------------------------
# extraction

def _bump(nested: dict, table: str, key, n: int = 1) -> None:
    nested.setdefault(table, Counter())[key] += n


def _pk_rows(stmt: Statement, catalog: SchemaCatalog, table: str) -> list:
    pk = catalog.get(table).primary_key
    return [(pk, a.value) for a in stmt.predicate
            if a.column.table == table and a.column.column == pk and a.op == "="]


def _classify(rws: RWSet, table: str) -> AffectingClass:
    if rws.row_read.get(table) or rws.row_write.get(table):
        return AffectingClass.RAS
    if rws.star_read[table] or rws.star_write[table]:
        return AffectingClass.TAS
    return AffectingClass.CAS


def extract(stmt: Statement, catalog: SchemaCatalog,
            granularity: Granularity = Granularity.ALL) -> RWSet:
    """Read/write sets of a single bound statement."""
    if not stmt.is_bound:
        raise UnboundPlaceholder(stmt.text or str(stmt))
    rws = RWSet()
    kind = stmt.kind
    if kind.is_control:
        return rws
    if kind is StatementKind.SELECT:
        for t in stmt.target_tables:
            rws.table_read[t] += 1
        cols: list[ColumnRef] = [a.column for a in stmt.predicate]
        if stmt.join_spec is not None:
            cols.extend(stmt.join_spec)
        for p in stmt.projections:
            if p == STAR:
                for t in stmt.target_tables:
                    rws.star_read[t] += 1
            elif isinstance(p, Aggregate):
                if p.arg == STAR:
                    # COUNT(*) observes row existence: read the key column
                    for t in stmt.target_tables:
                        cols.append(ColumnRef(t, catalog.get(t).primary_key))
                else:
                    cols.append(p.arg)
            else:
                cols.append(p)
        for c in dict.fromkeys(cols):
            _bump(rws.col_read, c.table, c.qualified)
        for t in stmt.target_tables:
            for row in dict.fromkeys(_pk_rows(stmt, catalog, t)):
                _bump(rws.row_read, t, row)
    elif kind is StatementKind.INSERT:
        t = stmt.target_tables[0]
        schema = catalog.get(t)
        rws.table_write[t] += 1
        rws.star_write[t] += 1
        _bump(rws.row_write, t, (schema.primary_key, stmt.values[schema.pk_index]))
    elif kind in (StatementKind.UPDATE, StatementKind.DELETE):
        t = stmt.target_tables[0]
        rws.table_write[t] += 1
        if kind is StatementKind.DELETE:
            rws.star_write[t] += 1
        else:
            for c in dict.fromkeys(c for c, _ in stmt.set_clauses):
                _bump(rws.col_write, t, c.qualified)
        if stmt.predicate:
            rws.table_read[t] += 1
            for c in dict.fromkeys(a.column for a in stmt.predicate):
                _bump(rws.col_read, t, c.qualified)
        for row in dict.fromkeys(_pk_rows(stmt, catalog, t)):
            _bump(rws.row_read, t, row)
            _bump(rws.row_write, t, row)
    elif kind is StatementKind.CREATE_TABLE:
        t = stmt.create.name
        rws.table_write[t] += 1
        rws.star_write[t] += 1
    for t in rws.tables:
        rws.classes[t] = Counter({_classify(rws, t): 1})
    return degrade(rws, granularity)


def extract_all(stmts: Iterable[Statement], catalog: SchemaCatalog,
                granularity: Granularity = Granularity.ALL) -> RWSet:
    acc = RWSet()
    for s in stmts:
        merge_into(acc, extract(s, catalog, granularity))
    return acc


def degrade(rws: RWSet, granularity: Granularity) -> RWSet:
    """Coarsen a single-statement set to the configured granularity (in place)."""
    if granularity is Granularity.ALL:
        return rws
    rws.row_read.clear()
    rws.row_write.clear()
    if granularity is Granularity.CAS:
        for t, cnt in rws.classes.items():
            if AffectingClass.RAS in cnt:
                n = cnt.pop(AffectingClass.RAS)
                cnt[AffectingClass.CAS] += n
        return rws
    for t in rws.tables:
        if t in rws.table_write:
            rws.star_write[t] = max(rws.star_write[t], 1)
        if t in rws.table_read:
            rws.star_read[t] = max(rws.star_read[t], 1)
        n = sum(rws.classes[t].values())
        rws.classes[t] = Counter({AffectingClass.TAS: n})
    return rws


# ---------------------------------------------------------------------------
# counter arithmetic

_FLAT = ("table_read", "table_write", "star_read", "star_write")
_NESTED = ("col_read", "col_write", "row_read", "row_write", "classes")


def merge_into(acc: RWSet, other: RWSet) -> RWSet:
    for name in _FLAT:
        getattr(acc, name).update(getattr(other, name))
    for name in _NESTED:
        dst = getattr(acc, name)
        for t, cnt in getattr(other, name).items():
            dst.setdefault(t, Counter()).update(cnt)
    return acc


def merge(acc: RWSet, other: RWSet) -> RWSet:
    """Key-wise counter sum; classes combine as all-RAS, all-CAS, else TAS."""
    return merge_into(acc.copy(), other)


def _sub(dst: Counter, src: Counter, where: str) -> None:
    for k, n in src.items():
        have = dst.get(k, 0)
        if have < n:
            raise UnderflowViolation(f"{where}: {k!r} has {have}, removing {n}")
    for k, n in src.items():
        left = dst[k] - n
        if left:
            dst[k] = left
        else:
            del dst[k]


def remove_from(acc: RWSet, other: RWSet) -> RWSet:
    # validate first so a failed removal leaves acc untouched
    for name in _FLAT:
        a, o = getattr(acc, name), getattr(other, name)
        for k, n in o.items():
            if a.get(k, 0) < n:
                raise UnderflowViolation(f"{name}: {k!r} has {a.get(k, 0)}, removing {n}")
    for name in _NESTED:
        a = getattr(acc, name)
        for t, cnt in getattr(other, name).items():
            have = a.get(t, Counter())
            for k, n in cnt.items():
                if have.get(k, 0) < n:
                    raise UnderflowViolation(f"{name}[{t}]: {k!r} has {have.get(k, 0)}, removing {n}")
    for name in _FLAT:
        _sub(getattr(acc, name), getattr(other, name), name)
    for name in _NESTED:
        a = getattr(acc, name)
        for t, cnt in getattr(other, name).items():
            _sub(a[t], cnt, name)
            if not a[t]:
                del a[t]
    return acc


def remove(acc: RWSet, other: RWSet) -> RWSet:
    """Inverse of :func:`merge` for a previously merged *other*."""
    return remove_from(acc.copy(), other)


# ---------------------------------------------------------------------------
# independence

def _cols_overlap(a: RWSet, a_write: bool, b: RWSet, b_write: bool, t: str) -> bool:
    def view(s: RWSet, write_only: bool):
        cols = set(s.col_write.get(t, ()))
        star = bool(s.star_write[t])
        if not write_only:
            cols |= set(s.col_read.get(t, ()))
            star = star or bool(s.star_read[t])
        return cols, star

    ca, sa = view(a, a_write)
    cb, sb = view(b, b_write)
    if sa and (cb or sb):
        return True
    if sb and ca:
        return True
    return bool(ca & cb)


def _rows_overlap(a: RWSet, a_write: bool, b: RWSet, b_write: bool, t: str) -> bool:
    ra = set(a.row_write.get(t, ()))
    if not a_write:
        ra |= set(a.row_read.get(t, ()))
    rb = set(b.row_write.get(t, ()))
    if not b_write:
        rb |= set(b.row_read.get(t, ()))
    return bool(ra & rb)


def are_independent(ts1: RWSet, ts2: RWSet) -> bool:
    """True when the two states touch no common data item with a write."""
    w1, w2 = ts1.write_tables, ts2.write_tables
    rw1, rw2 = ts1.tables, ts2.tables
    if not (w1 & rw2) and not (rw1 & w2):
        return True
    CAS, RAS = AffectingClass.CAS, AffectingClass.RAS
    for t in sorted((w1 & rw2) | (rw1 & w2)):
        c1, c2 = ts1.class_of(t), ts2.class_of(t)
        if c1 is CAS and c2 is CAS:
            if not _cols_overlap(ts1, True, ts2, False, t) and \
                    not _cols_overlap(ts1, False, ts2, True, t):
                continue
        elif c1 is RAS and c2 is RAS:
            if not _rows_overlap(ts1, True, ts2, False, t) and \
                    not _rows_overlap(ts1, False, ts2, True, t):
                continue
        return False
    return True


# ---------------------------------------------------------------------------
# debug/golden serialization

def _key_text(key) -> str:
    if isinstance(key, tuple):
        col, val = key
        return f"{col}={render_literal(val)}"
    if isinstance(key, AffectingClass):
        return key.name
    return str(key)


def dump(rws: RWSet) -> str:
    """Sorted ``table|kind|key|count`` lines."""
    lines = []
    for name in ("table_read", "table_write", "star_read", "star_write"):
        for t, n in getattr(rws, name).items():
            lines.append(f"{t}|{name}|{'*' if name.startswith('star') else t}|{n}")
    for name in _NESTED:
        for t, cnt in getattr(rws, name).items():
            kind = "class" if name == "classes" else name
            for k, n in cnt.items():
                lines.append(f"{t}|{kind}|{_key_text(k)}|{n}")
    for t, cls in rws.class_per_table.items():
        lines.append(f"{t}|effective_class|{cls.name}|1")
    return "\n".join(sorted(lines))
