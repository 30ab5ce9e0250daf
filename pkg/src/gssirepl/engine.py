"""In-memory multi-version storage engine with snapshot isolation.

Each committed write installs a new version under the next commit sequence
number; transactions read the newest version at or below their snapshot,
overlaid with their own uncommitted writes.  Commit applies the
first-committer-wins rule.
"""

from __future__ import annotations

import itertools
import json
import re
import threading
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Any, Optional

from .sqlparse import (STAR, Aggregate, Atom, ColumnRef, SchemaCatalog, Statement,
                       StatementKind, TableSchema, UnknownTable)


class EngineError(Exception):
    pass


class TableMissing(EngineError):
    pass


class EngineTypeError(EngineError, TypeError):
    pass


class DuplicateKey(EngineError):
    pass


class WriteWriteConflict(EngineError):
    pass


class ReplaySafetyConflict(WriteWriteConflict):
    """A write statement's predicate read was invalidated by a concurrent commit."""


class TransactionClosed(EngineError):
    pass


class CorruptImage(EngineError):
    pass


_TOMBSTONE = None


@dataclass
class VersionedTable:
    schema: TableSchema
    # pk -> parallel lists of commit seqs and row tuples (None = tombstone)
    seqs: dict = field(default_factory=dict)
    rows: dict = field(default_factory=dict)

    def visible(self, pk, snapshot: int):
        seqs = self.seqs.get(pk)
        if not seqs:
            return None
        i = bisect_right(seqs, snapshot)
        if i == 0:
            return None
        return self.rows[pk][i - 1]

    def last_seq(self, pk) -> int:
        seqs = self.seqs.get(pk)
        return seqs[-1] if seqs else 0

    def install(self, pk, seq: int, row) -> None:
        seqs = self.seqs.setdefault(pk, [])
        if seqs and seqs[-1] >= seq:
            raise AssertionError(f"non-monotone version chain for {self.schema.name}:{pk}")
        seqs.append(seq)
        self.rows.setdefault(pk, []).append(row)

    def check_chains(self) -> None:
        for pk, seqs in self.seqs.items():
            assert all(a < b for a, b in zip(seqs, seqs[1:])), (self.schema.name, pk)
            rows = self.rows[pk]
            for a, b in zip(rows, rows[1:]):
                assert not (a is None and b is None), ("double tombstone", pk)


@dataclass
class EngineTxn:
    txn_id: int
    snapshot_seq: int
    # (table, pk) -> row tuple or None
    write_buffer: dict = field(default_factory=dict)
    active: bool = True
    cost: float = 0.0
    # data read by write statements, validated at commit when replay_safe
    read_keys: set = field(default_factory=set)
    read_tables: set = field(default_factory=set)
    commit_seq: Optional[int] = None
    versioned: bool = False

    @property
    def written_keys(self) -> set:
        return set(self.write_buffer)


@dataclass
class ResultSet:
    columns: tuple = ()
    rows: list = field(default_factory=list)
    rowcount: int = 0
    cost: float = 0.0

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=_row_sort_key)


def _row_sort_key(row):
    return tuple((v is None, type(v).__name__ if not isinstance(v, (int, float)) else "",
                  v if v is not None else 0) for v in row)


_NUMERIC = (int, float)


def _compare(left, op: str, right) -> bool:
    if left is None or right is None:
        return False
    if isinstance(left, bool) or isinstance(right, bool):
        raise EngineTypeError("boolean values are not supported")
    if isinstance(left, _NUMERIC) != isinstance(right, _NUMERIC):
        raise EngineTypeError(f"cannot compare {type(left).__name__} with {type(right).__name__}")
    if op == "=":
        return left == right
    if op == "<>":
        return left != right
    if op == "<":
        return left < right
    if op == ">":
        return left > right
    if op == "<=":
        return left <= right
    return left >= right


def _coerce(value, ctype: str, where: str):
    if value is None:
        return None
    if ctype == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise EngineTypeError(f"{where}: expected int, got {value!r}")
        return value
    if ctype == "float":
        if isinstance(value, bool) or not isinstance(value, _NUMERIC):
            raise EngineTypeError(f"{where}: expected float, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise EngineTypeError(f"{where}: expected text, got {value!r}")
    return value


class Engine:
    """One database node (Primary, Seed or replica)."""

    def __init__(self, catalog: Optional[SchemaCatalog] = None, *, debug: bool = False,
                 replay_safe: bool = False):
        self.catalog = SchemaCatalog()
        self.tables: dict[str, VersionedTable] = {}
        self.latest_seq = 0
        self.debug = debug
        # replay_safe: also abort writers whose predicate reads were overwritten by a
        # concurrent commit, so commit-order statement replay reproduces this state
        self.replay_safe = replay_safe
        self._commit_log: list[tuple[int, frozenset, frozenset]] = []
        self._ids = itertools.count(1)
        self._lock = threading.RLock()
        for schema in (catalog or ()):
            self.create_table(schema)

    # -- DDL
    def create_table(self, schema: TableSchema) -> None:
        with self._lock:
            if schema.name in self.catalog:
                raise EngineError(f"table {schema.name} exists")
            self.catalog.add(schema)
            self.tables[schema.name] = VersionedTable(schema)

    def _table(self, name: str) -> VersionedTable:
        try:
            return self.tables[name]
        except KeyError:
            for k, v in self.tables.items():
                if k.lower() == name.lower():
                    return v
            raise TableMissing(name) from None

    # -- transactions
    def begin(self, snapshot_seq: Optional[int] = None) -> EngineTxn:
        with self._lock:
            snap = self.latest_seq if snapshot_seq is None else snapshot_seq
            if snap > self.latest_seq or snap < 0:
                raise EngineError(f"snapshot {snap} outside [0, {self.latest_seq}]")
            return EngineTxn(next(self._ids), snap)

    def _read_row(self, txn: EngineTxn, table: VersionedTable, pk):
        key = (table.schema.name, pk)
        if key in txn.write_buffer:
            return txn.write_buffer[key]
        return table.visible(pk, txn.snapshot_seq)

    def _scan(self, txn: EngineTxn, table: VersionedTable, predicate: list[Atom]):
        """Yield (pk, row) visible to *txn* that satisfy the atoms on *table*."""
        name = table.schema.name
        pk_col = table.schema.primary_key
        eq_keys = [a.value for a in predicate if a.column.column == pk_col and a.op == "="]
        if eq_keys:
            candidates = list(dict.fromkeys(eq_keys))
        else:
            candidates = list(table.seqs)
            extra = [pk for (t, pk) in txn.write_buffer if t == name and pk not in table.seqs]
            candidates.extend(extra)
        idx = [(table.schema.columns.index(a.column.column), a) for a in predicate]
        examined = 0
        for pk in candidates:
            row = self._read_row(txn, table, pk)
            examined += 1
            if row is None:
                continue
            if all(_compare(row[i], a.op, a.value) for i, a in idx):
                yield pk, row
        txn.cost += examined

    def execute(self, txn: EngineTxn, stmt: Statement) -> ResultSet:
        if not txn.active:
            raise TransactionClosed(f"txn {txn.txn_id} is closed")
        if not stmt.is_bound or not stmt.is_deterministic:
            raise EngineError("statement must be bound and deterministic before execution")
        before = txn.cost
        kind = stmt.kind
        if kind is StatementKind.SELECT:
            res = self._select(txn, stmt)
        elif kind is StatementKind.INSERT:
            res = self._insert(txn, stmt)
        elif kind is StatementKind.UPDATE:
            res = self._update(txn, stmt)
        elif kind is StatementKind.DELETE:
            res = self._delete(txn, stmt)
        elif kind is StatementKind.CREATE_TABLE:
            self.create_table(stmt.create)
            res = ResultSet()
        else:
            raise EngineError(f"{kind.value} is handled by the session, not the engine")
        txn.cost += 1.0
        res.cost = txn.cost - before
        return res

    def _select(self, txn: EngineTxn, stmt: Statement) -> ResultSet:
        tables = [self._table(t) for t in stmt.target_tables]
        preds = {t.schema.name: [a for a in stmt.predicate if a.column.table == t.schema.name]
                 for t in tables}
        if stmt.join_spec is None:
            t = tables[0]
            matches = [((t.schema.name, row),) for _, row in self._scan(txn, t, preds[t.schema.name])]
        else:
            left, right = stmt.join_spec
            outer, inner = tables
            if left.table != outer.schema.name:
                left, right = right, left
            inner_rows = list(self._scan(txn, inner, preds[inner.schema.name]))
            li = outer.schema.columns.index(left.column)
            ri = inner.schema.columns.index(right.column)
            matches = []
            for _, orow in self._scan(txn, outer, preds[outer.schema.name]):
                for _, irow in inner_rows:
                    txn.cost += 1
                    if _compare(orow[li], "=", irow[ri]):
                        matches.append(((outer.schema.name, orow), (inner.schema.name, irow)))

        def get(match, col: ColumnRef):
            for tname, row in match:
                if tname == col.table:
                    return row[self.tables[tname].schema.columns.index(col.column)]
            raise AssertionError(col)

        if stmt.projections == (STAR,):
            cols = tuple(f"{t.schema.name}.{c}" for t in tables for c in t.schema.columns)
            rows = [tuple(v for _, row in m for v in row) for m in matches]
            return ResultSet(cols, rows, len(rows))
        if all(isinstance(p, Aggregate) for p in stmt.projections):
            out = []
            for p in stmt.projections:
                if p.func == "COUNT":
                    if p.arg == STAR:
                        out.append(len(matches))
                    else:
                        out.append(sum(1 for m in matches if get(m, p.arg) is not None))
                else:
                    vals = [get(m, p.arg) for m in matches if get(m, p.arg) is not None]
                    if any(isinstance(v, str) for v in vals):
                        raise EngineTypeError("SUM over text column")
                    out.append(sum(vals) if vals else None)
            cols = tuple(f"{p.func}({'*' if p.arg == STAR else p.arg.qualified})"
                         for p in stmt.projections)
            return ResultSet(cols, [tuple(out)], 1)
        cols = tuple(p.qualified for p in stmt.projections)
        rows = [tuple(get(m, p) for p in stmt.projections) for m in matches]
        return ResultSet(cols, rows, len(rows))

    def _insert(self, txn: EngineTxn, stmt: Statement) -> ResultSet:
        table = self._table(stmt.target_tables[0])
        schema = table.schema
        row = tuple(_coerce(v, t, f"{schema.name}.{c}")
                    for v, t, c in zip(stmt.values, schema.types, schema.columns))
        pk = row[schema.pk_index]
        if pk is None:
            raise EngineError(f"{schema.name}: primary key may not be NULL")
        txn.cost += 1
        if self._read_row(txn, table, pk) is not None:
            raise DuplicateKey(f"{schema.name}: key {pk!r} exists")
        txn.write_buffer[(schema.name, pk)] = row
        return ResultSet(rowcount=1)

    def _note_predicate_read(self, txn: EngineTxn, table: VersionedTable, stmt: Statement) -> None:
        pk_col = table.schema.primary_key
        keys = [a.value for a in stmt.predicate if a.column.column == pk_col and a.op == "="]
        if keys:
            txn.read_keys.update((table.schema.name, k) for k in keys)
        else:
            txn.read_tables.add(table.schema.name)

    def _update(self, txn: EngineTxn, stmt: Statement) -> ResultSet:
        table = self._table(stmt.target_tables[0])
        self._note_predicate_read(txn, table, stmt)
        schema = table.schema
        assigns = [(schema.columns.index(c.column),
                    _coerce(v, schema.column_type(c.column), c.qualified))
                   for c, v in stmt.set_clauses]
        hits = list(self._scan(txn, table, list(stmt.predicate)))
        for pk, row in hits:
            new = list(row)
            for i, v in assigns:
                new[i] = v
            txn.write_buffer[(schema.name, pk)] = tuple(new)
        return ResultSet(rowcount=len(hits))

    def _delete(self, txn: EngineTxn, stmt: Statement) -> ResultSet:
        table = self._table(stmt.target_tables[0])
        self._note_predicate_read(txn, table, stmt)
        hits = list(self._scan(txn, table, list(stmt.predicate)))
        for pk, _ in hits:
            txn.write_buffer[(table.schema.name, pk)] = _TOMBSTONE
        return ResultSet(rowcount=len(hits))

    def commit(self, txn: EngineTxn) -> int:
        """Install the write buffer under a new commit sequence number.

        Read-only transactions return the current sequence without allocating.
        """
        if not txn.active:
            raise TransactionClosed(f"txn {txn.txn_id} is closed")
        with self._lock:
            txn.active = False
            if not txn.write_buffer:
                txn.commit_seq = self.latest_seq
                return self.latest_seq
            for (tname, pk) in txn.write_buffer:
                if self._table(tname).last_seq(pk) > txn.snapshot_seq:
                    raise WriteWriteConflict(f"{tname}:{pk!r} committed concurrently")
            if self.replay_safe and (txn.read_keys or txn.read_tables):
                self._validate_reads(txn)
            # blind no-op writes (tombstone over absent row) are dropped
            effective = []
            for (tname, pk), row in sorted(txn.write_buffer.items(), key=lambda kv: repr(kv[0])):
                table = self._table(tname)
                current = table.visible(pk, self.latest_seq)
                if row is None and current is None:
                    continue
                effective.append((table, pk, row))
            if not effective:
                txn.commit_seq = self.latest_seq
                return self.latest_seq
            self.latest_seq += 1
            for table, pk, row in effective:
                table.install(pk, self.latest_seq, row)
            if self.replay_safe:
                self._commit_log.append((
                    self.latest_seq,
                    frozenset((t.schema.name, pk) for t, pk, _ in effective),
                    frozenset(t.schema.name for t, _, _ in effective)))
            txn.commit_seq = self.latest_seq
            txn.versioned = True
            if self.debug:
                self.check_invariants()
            return self.latest_seq

    def _validate_reads(self, txn: EngineTxn) -> None:
        log = self._commit_log
        i = bisect_right(log, txn.snapshot_seq, key=lambda e: e[0])
        for seq, keys, tables in log[i:]:
            if keys & txn.read_keys or tables & txn.read_tables:
                raise ReplaySafetyConflict(
                    f"txn {txn.txn_id}: predicate read overwritten by commit {seq}")

    def rollback(self, txn: EngineTxn) -> None:
        txn.active = False
        txn.write_buffer.clear()

    def run(self, stmts, snapshot_seq: Optional[int] = None) -> list[ResultSet]:
        """Execute statements in one transaction and commit it."""
        txn = self.begin(snapshot_seq)
        try:
            results = [self.execute(txn, s) for s in stmts]
        except Exception:
            self.rollback(txn)
            raise
        self.commit(txn)
        return results

    def apply_atomically(self, stmts) -> tuple[list[ResultSet], int]:
        """Begin, execute and commit with no other transaction interleaving."""
        with self._lock:
            txn = self.begin()
            try:
                results = [self.execute(txn, s) for s in stmts]
            except Exception:
                self.rollback(txn)
                raise
            return results, self.commit(txn)

    def check_invariants(self) -> None:
        for table in self.tables.values():
            table.check_chains()

    # -- state inspection
    def visible_rows(self, table: str, snapshot_seq: Optional[int] = None) -> list[tuple]:
        t = self._table(table)
        snap = self.latest_seq if snapshot_seq is None else snapshot_seq
        rows = []
        for pk in t.seqs:
            row = t.visible(pk, snap)
            if row is not None:
                rows.append(row)
        return sorted(rows, key=lambda r: _row_sort_key((r[t.schema.pk_index],)))

    def _state_lines(self, snapshot_seq: Optional[int]) -> tuple[list[str], int]:
        schemas = sorted(self.catalog, key=lambda s: s.name)
        lines = [_catalog_line(s) for s in schemas]
        nrows = 0
        for schema in schemas:
            for row in self.visible_rows(schema.name, snapshot_seq):
                lines.append(_row_line(schema, row))
                nrows += 1
        return lines, nrows

    def dump_state(self, snapshot_seq: Optional[int] = None) -> str:
        """Deterministic text of the visible state (catalog plus sorted rows)."""
        lines, _ = self._state_lines(snapshot_seq)
        return "".join(line + "\n" for line in lines)

    def row_count(self) -> int:
        return sum(len(self.visible_rows(s.name)) for s in self.catalog)

    # -- seed images
    def snapshot_export(self, upto_seq: Optional[int] = None) -> str:
        with self._lock:
            seq = self.latest_seq if upto_seq is None else upto_seq
            if seq > self.latest_seq or seq < 0:
                raise EngineError(f"cannot export at {seq}; latest is {self.latest_seq}")
            lines, nrows = self._state_lines(seq)
        body = "".join(line + "\n" for line in lines)
        return f"{SEED_MAGIC} {seq}\n{body}end|{nrows}\n"

    @classmethod
    def snapshot_import(cls, image: str, *, debug: bool = False) -> "Engine":
        _, tables, rows = parse_seed_image(image)
        eng = cls(debug=debug)
        for schema in tables:
            eng.create_table(schema)
        for tname, row in rows:
            t = eng.tables[tname]
            pk = row[t.schema.pk_index]
            if pk in t.seqs:
                raise CorruptImage(f"duplicate key {pk!r} in {tname}")
            t.install(pk, 0, row)
        return eng

    def clone(self) -> "Engine":
        return Engine.snapshot_import(self.snapshot_export())


# ---------------------------------------------------------------------------
# seed image format

SEED_MAGIC = "GSSIREPL-SEED v1"

_VALUE_RE = re.compile(r'NULL|"(?:[^"\\]|\\.)*"|-?[0-9][0-9.eE+-]*')


def encode_value(v: Any) -> str:
    if v is None:
        return "NULL"
    if isinstance(v, bool):
        raise TypeError("booleans are not storable")
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        text = repr(v)
        return text if any(c in text for c in ".eE") else text + ".0"
    return json.dumps(v, ensure_ascii=True)


def decode_value(text: str) -> Any:
    if text == "NULL":
        return None
    if text.startswith('"'):
        return json.loads(text)
    if any(c in text for c in ".eE"):
        return float(text)
    return int(text)


def _catalog_line(schema: TableSchema) -> str:
    cols = ",".join(f"{c}:{t}" for c, t in zip(schema.columns, schema.types))
    return f"table|{schema.name}|{schema.primary_key}|{cols}"


def _row_line(schema: TableSchema, row: tuple) -> str:
    pk = encode_value(row[schema.pk_index])
    vals = ",".join(f"{c}={encode_value(v)}" for c, v in zip(schema.columns, row))
    return f"row|{schema.name}|{pk}|{vals}"


def _parse_values(schema: TableSchema, text: str) -> tuple:
    out = []
    pos = 0
    for i, col in enumerate(schema.columns):
        prefix = f"{col}="
        if not text.startswith(prefix, pos):
            raise CorruptImage(f"expected {prefix!r} at offset {pos}")
        pos += len(prefix)
        m = _VALUE_RE.match(text, pos)
        if m is None:
            raise CorruptImage(f"bad value for {schema.name}.{col}")
        out.append(decode_value(m.group()))
        pos = m.end()
        if i < len(schema.columns) - 1:
            if text[pos:pos + 1] != ",":
                raise CorruptImage("expected ','")
            pos += 1
    if pos != len(text):
        raise CorruptImage("trailing data in row")
    return tuple(out)


def parse_seed_image(image: str):
    """Return (upto_seq, [TableSchema], [(table, row)]); raises CorruptImage."""
    if not image.endswith("\n"):
        raise CorruptImage("image truncated (missing final newline)")
    lines = image[:-1].split("\n")
    head = lines[0]
    if not head.startswith(SEED_MAGIC + " "):
        raise CorruptImage("bad header")
    try:
        seq = int(head[len(SEED_MAGIC) + 1:])
        if not lines[-1].startswith("end|"):
            raise CorruptImage("image truncated (missing trailer)")
        expected = int(lines[-1][4:])
    except ValueError as exc:
        raise CorruptImage(str(exc)) from None
    tables: dict[str, TableSchema] = {}
    rows = []
    for line in lines[1:-1]:
        parts = line.split("|", 3)
        if len(parts) != 4:
            raise CorruptImage(f"malformed line {line!r}")
        tag, name, key, rest = parts
        try:
            if tag == "table":
                if rows:
                    raise CorruptImage("catalog line after rows")
                cols, types = [], []
                for item in rest.split(","):
                    c, t = item.split(":")
                    cols.append(c)
                    types.append(t)
                tables[name] = TableSchema(name, tuple(cols), key, tuple(types))
            elif tag == "row":
                if name not in tables:
                    raise CorruptImage(f"row for undeclared table {name}")
                schema = tables[name]
                row = _parse_values(schema, rest)
                if encode_value(row[schema.pk_index]) != key:
                    raise CorruptImage(f"row key mismatch in {line!r}")
                rows.append((name, row))
            else:
                raise CorruptImage(f"unknown record {tag!r}")
        except CorruptImage:
            raise
        except Exception as exc:
            raise CorruptImage(f"{exc} in {line!r}") from None
    if len(rows) != expected:
        raise CorruptImage(f"expected {expected} rows, found {len(rows)}")
    return seq, list(tables.values()), rows


__all__ = [
    "Engine", "EngineTxn", "ResultSet", "VersionedTable", "EngineError", "TableMissing",
    "EngineTypeError", "DuplicateKey", "WriteWriteConflict", "CorruptImage", "SEED_MAGIC",
    "parse_seed_image", "UnknownTable",
]
