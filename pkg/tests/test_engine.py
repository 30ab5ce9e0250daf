import pytest
from hypothesis import given, settings, strategies as st

from gssirepl import golden
from gssirepl.engine import (CorruptImage, DuplicateKey, Engine, EngineError, EngineTypeError,
                             ReplaySafetyConflict, TransactionClosed, WriteWriteConflict)
from gssirepl.sqlparse import SchemaCatalog, TableSchema, parse


def q(eng, sql, snapshot=None):
    return eng.run([parse(sql, eng.catalog)], snapshot)[0]


def ex(eng, txn, sql):
    return eng.execute(txn, parse(sql, eng.catalog))


@pytest.fixture
def eng():
    return golden.seeded_engine()


def test_select_filter_and_join(eng):
    assert q(eng, "SELECT A1 FROM R WHERE A2 < 50").sorted_rows() == [(100,), (120,)]
    rows = q(eng, "SELECT A1, B1 FROM R JOIN S ON A1 = B2").sorted_rows()
    assert rows == [(100, 1), (110, 2)]
    assert q(eng, "SELECT COUNT(*), SUM(A2) FROM R").rows == [(3, 90)]


def test_snapshot_reads_are_stable(eng):
    t1 = eng.begin()
    eng.run([parse("UPDATE R SET A2 = 99 WHERE A1 = 100", eng.catalog)])
    assert ex(eng, t1, "SELECT A2 FROM R WHERE A1 = 100").rows == [(10,)]
    assert q(eng, "SELECT A2 FROM R WHERE A1 = 100").rows == [(99,)]
    assert q(eng, "SELECT A2 FROM R WHERE A1 = 100", snapshot=1).rows == [(10,)]


def test_read_your_writes_and_rollback(eng):
    t = eng.begin()
    ex(eng, t, "DELETE FROM R WHERE A1 = 100")
    ex(eng, t, "INSERT INTO R VALUES (100, 1, 1, 1)")
    assert ex(eng, t, "SELECT A2 FROM R WHERE A1 = 100").rows == [(1,)]
    eng.rollback(t)
    assert q(eng, "SELECT A2 FROM R WHERE A1 = 100").rows == [(10,)]
    with pytest.raises(TransactionClosed):
        ex(eng, t, "SELECT A1 FROM R")


def test_first_committer_wins(eng):
    a, b = eng.begin(), eng.begin()
    ex(eng, a, "UPDATE R SET A2 = 1 WHERE A1 = 100")
    ex(eng, b, "UPDATE R SET A3 = 1 WHERE A1 = 100")
    eng.commit(a)
    with pytest.raises(WriteWriteConflict):
        eng.commit(b)


def test_disjoint_writers_both_commit(eng):
    a, b = eng.begin(), eng.begin()
    ex(eng, a, "UPDATE R SET A2 = 1 WHERE A1 = 100")
    ex(eng, b, "UPDATE R SET A2 = 1 WHERE A1 = 110")
    assert eng.commit(a) < eng.commit(b)


def test_replay_safe_aborts_stale_predicate_reader():
    eng = golden.seeded_engine(replay_safe=True)
    a, b = eng.begin(), eng.begin()
    ex(eng, a, "UPDATE R SET A2 = 10 WHERE A1 = 110")
    ex(eng, b, "UPDATE R SET A4 = 5 WHERE A2 < 50")  # its predicate now also matches row 110
    eng.commit(a)
    with pytest.raises(ReplaySafetyConflict):
        eng.commit(b)


def test_write_skew_allowed_without_replay_safety(eng):
    a, b = eng.begin(), eng.begin()
    ex(eng, a, "UPDATE R SET A2 = 10 WHERE A1 = 110")
    ex(eng, b, "UPDATE R SET A4 = 5 WHERE A2 < 50")
    eng.commit(a)
    eng.commit(b)


def test_duplicate_key_and_types(eng):
    with pytest.raises(DuplicateKey):
        q(eng, "INSERT INTO R VALUES (100, 0, 0, 0)")
    with pytest.raises(EngineTypeError):
        q(eng, "UPDATE R SET A2 = 'x' WHERE A1 = 100")
    with pytest.raises(EngineError):
        q(eng, "INSERT INTO R VALUES (NULL, 0, 0, 0)")


def test_read_only_and_noop_commits_do_not_advance(eng):
    before = eng.latest_seq
    q(eng, "SELECT * FROM R")
    q(eng, "DELETE FROM R WHERE A1 = 5555")
    assert eng.latest_seq == before


def test_seed_image_roundtrip(eng):
    q(eng, "INSERT INTO R VALUES (7, NULL, -3, 0)")
    img = eng.snapshot_export()
    clone = Engine.snapshot_import(img)
    assert clone.dump_state() == eng.dump_state()
    old = Engine.snapshot_import(eng.snapshot_export(upto_seq=1))
    assert old.dump_state() == eng.dump_state(snapshot_seq=1)


def test_text_values_roundtrip():
    eng = Engine(SchemaCatalog([TableSchema("T", ("K", "V", "F"), "K", ("int", "text", "float"))]))
    q(eng, "INSERT INTO T VALUES (1, 'a,b=\"c|d''', 2.5)")
    assert Engine.snapshot_import(eng.snapshot_export()).dump_state() == eng.dump_state()


@pytest.mark.parametrize("mutate", [
    lambda s: s[:-1],                                   # missing final newline
    lambda s: s.rsplit("end|", 1)[0],                   # missing trailer
    lambda s: s.replace("end|6", "end|5"),              # row count mismatch
    lambda s: s.replace("GSSIREPL-SEED", "OTHER-SEED"),  # bad header
    lambda s: s.replace("row|R|100|A1=100", "row|R|101|A1=100"),
])
def test_corrupt_images_rejected(eng, mutate):
    img = eng.snapshot_export()
    with pytest.raises(CorruptImage):
        Engine.snapshot_import(mutate(img))


ops = st.lists(st.tuples(st.sampled_from(["ins", "upd", "del"]), st.integers(0, 6),
                         st.integers(0, 9)), min_size=1, max_size=40)


@settings(max_examples=60)
@given(ops)
def test_engine_matches_dict_model(program):
    eng = Engine(SchemaCatalog([TableSchema("T", ("K", "V"), "K", ("int", "int"))]))
    model: dict[int, int] = {}
    for op, k, v in program:
        sql = {"ins": f"INSERT INTO T VALUES ({k}, {v})",
               "upd": f"UPDATE T SET V = {v} WHERE K = {k}",
               "del": f"DELETE FROM T WHERE V = {v}"}[op]
        try:
            q(eng, sql)
        except DuplicateKey:
            assert op == "ins" and k in model
            continue
        if op == "ins":
            model[k] = v
        elif op == "upd" and k in model:
            model[k] = v
        elif op == "del":
            model = {kk: vv for kk, vv in model.items() if vv != v}
        assert sorted(eng.visible_rows("T")) == sorted(model.items())
    eng.check_invariants()
