import random

import pytest
from hypothesis import given, strategies as st

from gssirepl.sqlparse import (Aggregate, ArityMismatch, CatalogError, ColumnRef, Macro,
                               Placeholder, SchemaCatalog, SQLSyntaxError, StatementKind,
                               TableSchema, UnboundPlaceholder, UnknownColumn, UnknownTable,
                               bind, parse, render, render_literal, rewrite_nondeterministic)


def test_select_resolves_and_qualifies(cat):
    s = parse("select a3, A4 from r where a1 = 100", cat)
    assert s.kind is StatementKind.SELECT
    assert s.target_tables == ("R",)
    assert s.projections == (ColumnRef("R", "A3"), ColumnRef("R", "A4"))
    assert s.predicate[0].column == ColumnRef("R", "A1")
    assert s.predicate[0].value == 100


def test_join_and_qualified_columns(cat):
    s = parse("SELECT R.A1, S.B2 FROM R INNER JOIN S ON R.A1 = S.B2 WHERE S.B5 >= 3", cat)
    assert s.target_tables == ("R", "S")
    assert s.join_spec == (ColumnRef("R", "A1"), ColumnRef("S", "B2"))
    assert render(s) == "SELECT R.A1, S.B2 FROM R JOIN S ON R.A1 = S.B2 WHERE S.B5 >= 3"


def test_aggregates(cat):
    s = parse("SELECT COUNT(*), SUM(A2) FROM R", cat)
    assert s.projections == (Aggregate("COUNT", "*"), Aggregate("SUM", ColumnRef("R", "A2")))


@pytest.mark.parametrize("sql,kind", [
    ("BEGIN", StatementKind.BEGIN), ("START TRANSACTION", StatementKind.BEGIN),
    ("COMMIT WORK", StatementKind.COMMIT), ("ROLLBACK;", StatementKind.ROLLBACK),
    ("INSERT INTO R VALUES (1, 2, 3, 4)", StatementKind.INSERT),
    ("DELETE FROM S", StatementKind.DELETE),
])
def test_statement_kinds(cat, sql, kind):
    assert parse(sql, cat).kind is kind


def test_insert_with_column_list_reorders(cat):
    s = parse("INSERT INTO R (A4, A3, A2, A1) VALUES (4, 3, 2, 1)", cat)
    assert s.values == (1, 2, 3, 4)


def test_create_table_types_and_pk():
    s = parse("CREATE TABLE T (K INTEGER, V VARCHAR(10), F DOUBLE, PRIMARY KEY (K))",
              SchemaCatalog())
    assert s.create == TableSchema("T", ("K", "V", "F"), "K", ("int", "text", "float"))


@pytest.mark.parametrize("sql,exc", [
    ("SELECT A9 FROM R", UnknownColumn),
    ("SELECT * FROM Q", UnknownTable),
    ("INSERT INTO R VALUES (1, 2)", ArityMismatch),
    ("SELECT A1 FROM R WHERE A1 = 1 OR A2 = 2", SQLSyntaxError),
    ("SELECT A1 FROM R WHERE A1 IN (SELECT B1 FROM S)", SQLSyntaxError),
    ("SELECT A1, COUNT(*) FROM R", SQLSyntaxError),
    ("SELECT A1 FROM R ORDER BY A1", SQLSyntaxError),
    ("SELECT * FROM R LEFT JOIN S ON A1 = B1", SQLSyntaxError),
    ("UPDATE R SET A1 = 5 WHERE A2 = 1", SQLSyntaxError),
    ("UPDATE R SET A2 = 1, A2 = 2", SQLSyntaxError),
    ("INSERT INTO R VALUES (1, 2, 3, 4), (5, 6, 7, 8)", SQLSyntaxError),
    ("SELECT A1 FROM R garbage", SQLSyntaxError),
])
def test_rejections(cat, sql, exc):
    with pytest.raises(exc):
        parse(sql, cat)


def test_ambiguous_unqualified_column():
    cat = SchemaCatalog([TableSchema("X", ("K", "V"), "K", ("int", "int")),
                         TableSchema("Y", ("J", "V"), "J", ("int", "int"))])
    with pytest.raises(SQLSyntaxError):
        parse("SELECT V FROM X JOIN Y ON K = J", cat)


def test_duplicate_table_rejected():
    cat = SchemaCatalog([TableSchema("X", ("K",), "K", ("int",))])
    with pytest.raises(CatalogError):
        cat.add(TableSchema("x", ("K",), "K", ("int",)))


def test_bind_counts_placeholders_in_text_order(cat):
    s = parse("UPDATE R SET A2 = ?, A3 = ? WHERE A1 = ?", cat)
    assert [v for v in s.all_values()] == [Placeholder(0), Placeholder(1), Placeholder(2)]
    b = bind(s, [7, 8, 100])
    assert render(b) == "UPDATE R SET A2 = 7, A3 = 8 WHERE A1 = 100"
    with pytest.raises(UnboundPlaceholder):
        bind(s, [1])


def test_nondeterminism_rewrite(cat):
    s = parse("UPDATE R SET A2 = NOW(), A3 = CURRENT_TIMESTAMP, A4 = RAND() WHERE A1 = RAND()", cat)
    assert not s.is_deterministic
    ticks = iter(range(100, 200))
    rng = random.Random(3)
    out = rewrite_nondeterministic(s, lambda: next(ticks), rng)
    assert out.is_deterministic
    vals = out.all_values()
    # the clock is read once per statement, RAND draws once per occurrence
    assert vals[0] == vals[1] == 100
    expect = random.Random(3)
    assert vals[2:] == [expect.random(), expect.random()]
    assert parse(render(out), cat) == out


def test_render_literal():
    assert render_literal(None) == "NULL"
    assert render_literal("it's") == "'it''s'"
    assert render_literal(2.0) == "2.0"
    assert render_literal(Macro("NOW")) == "NOW()"


idents = st.sampled_from(["A1", "A2", "A3", "A4"])
literals = st.one_of(st.integers(-10**6, 10**6), st.none(),
                     st.text(alphabet="abc' xyz", max_size=6),
                     st.floats(allow_nan=False, allow_infinity=False, width=32))
ops = st.sampled_from(["=", "<>", "<", ">", "<=", ">="])


@st.composite
def statements(draw):
    kind = draw(st.sampled_from(["select", "update", "delete", "insert"]))
    preds = draw(st.lists(st.tuples(idents, ops, literals), max_size=3))
    where = (" WHERE " + " AND ".join(f"{c} {o} {render_literal(v)}" for c, o, v in preds)) \
        if preds else ""
    if kind == "select":
        cols = draw(st.lists(idents, min_size=1, max_size=4, unique=True))
        return f"SELECT {', '.join(cols)} FROM R{where}"
    if kind == "update":
        cols = draw(st.lists(st.sampled_from(["A2", "A3", "A4"]), min_size=1, max_size=3,
                             unique=True))
        sets = ", ".join(f"{c} = {render_literal(draw(literals))}" for c in cols)
        return f"UPDATE R SET {sets}{where}"
    if kind == "delete":
        return f"DELETE FROM R{where}"
    vals = ", ".join(render_literal(draw(literals)) for _ in range(4))
    return f"INSERT INTO R VALUES ({vals})"


@given(statements())
def test_render_parse_roundtrip(sql):
    cat = SchemaCatalog([TableSchema("R", ("A1", "A2", "A3", "A4"), "A1", ("int",) * 4)])
    s = parse(sql, cat)
    assert parse(render(s), cat) == s
    assert render(parse(render(s), cat)) == render(s)
