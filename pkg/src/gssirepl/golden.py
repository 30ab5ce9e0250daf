"""The worked example: five write and four read transactions over R and S.

Used by the ``golden`` CLI command and the exact-match tests.
"""

from __future__ import annotations

from .engine import Engine
from .rwsets import Granularity, extract
from .sqlparse import SchemaCatalog, TableSchema, bind, parse
from .txmanager import Completion, ConsistencyIndexes, TState, assign_tsids

R = TableSchema("R", ("A1", "A2", "A3", "A4"), "A1", ("int",) * 4)
S = TableSchema("S", ("B1", "B2", "B3", "B4", "B5"), "B1", ("int",) * 5)

FIRST_TSID = 11

WRITES = [
    ("W1", "UPDATE R SET A2 = ?, A3 = ? WHERE A1 = 100", (7, 8)),
    ("W2", "UPDATE S SET B2 = ? WHERE B5 > ?", (3, 40)),
    ("W3", "UPDATE R SET A3 = ?, A4 = ? WHERE A2 < ?", (1, 2, 50)),
    ("W4", "DELETE FROM R WHERE A1 = 120", ()),
    ("W5", "UPDATE S SET B4 = ? WHERE B5 < ?", (9, 40)),
]

READS = [
    ("R1", "SELECT * FROM R WHERE A2 > ?", (0,)),
    ("R2", "SELECT A3, A4 FROM R WHERE A1 = 100", ()),
    ("R3", "SELECT B2, B3 FROM S WHERE B5 < ?", (60,)),
    ("R4", "SELECT A1, B2, B3 FROM R JOIN S ON A1 = B2", ()),
]

EXPECTED_TSIDS = {"W1": 11, "W2": 12, "W3": 13, "W4": 14, "W5": 15}
EXPECTED_T_INDEX = {"R": 14, "S": 15}
EXPECTED_C_INDEX = {"R.A3": 13, "R.A4": 13, "S.B2": 12, "S.B4": 15}
EXPECTED_R_INDEX = {"R": {("A1", 100): 11, ("A1", 120): 14}}
EXPECTED_CONSISTENT = {"R1": 14, "R2": 13, "R3": 12, "R4": 14}

# name -> (tables written, column writes, row writes, tables read, column reads, row reads, class)
EXPECTED_WRITE_SETS = {
    "W1": ({"R"}, {"R.A2", "R.A3"}, {("A1", 100)}, {"R"}, {"R.A1"}, {("A1", 100)}, "RAS"),
    "W2": ({"S"}, {"S.B2"}, set(), {"S"}, {"S.B5"}, set(), "CAS"),
    "W3": ({"R"}, {"R.A3", "R.A4"}, set(), {"R"}, {"R.A2"}, set(), "CAS"),
    "W4": ({"R"}, {"*"}, {("A1", 120)}, {"R"}, {"R.A1"}, {("A1", 120)}, "RAS"),
    "W5": ({"S"}, {"S.B4"}, set(), {"S"}, {"S.B5"}, set(), "CAS"),
}
# name -> (tables, column reads, row reads, class)
EXPECTED_READ_SETS = {
    "R1": ({"R"}, {"*"}, set(), "TAS"),
    "R2": ({"R"}, {"R.A1", "R.A3", "R.A4"}, {("A1", 100)}, "RAS"),
    "R3": ({"S"}, {"S.B2", "S.B3", "S.B5"}, set(), "CAS"),
    "R4": ({"R", "S"}, {"R.A1", "S.B2", "S.B3"}, set(), "CAS"),
}


def catalog() -> SchemaCatalog:
    return SchemaCatalog([R, S])


def seeded_engine(**kwargs) -> Engine:
    """R and S with a few rows so that every example statement touches data."""
    eng = Engine(catalog(), **kwargs)
    rows = ["INSERT INTO R VALUES (100, 10, 0, 0)", "INSERT INTO R VALUES (110, 60, 0, 0)",
            "INSERT INTO R VALUES (120, 20, 0, 0)", "INSERT INTO S VALUES (1, 100, 5, 0, 30)",
            "INSERT INTO S VALUES (2, 110, 6, 0, 50)", "INSERT INTO S VALUES (3, 0, 7, 0, 70)"]
    eng.run([parse(s, eng.catalog) for s in rows])
    return eng


def write_statements(cat: SchemaCatalog | None = None) -> dict:
    cat = cat or catalog()
    return {name: bind(parse(sql, cat), params) for name, sql, params in WRITES}


def read_statements(cat: SchemaCatalog | None = None) -> dict:
    cat = cat or catalog()
    return {name: bind(parse(sql, cat), params) for name, sql, params in READS}


def write_tstates(granularity: Granularity = Granularity.ALL) -> dict[str, TState]:
    """W1..W5 as committed TStates with TSIDs issued after ``FIRST_TSID - 1``."""
    cat = catalog()
    stmts = write_statements(cat)
    tstates = {}
    for i, (name, stmt) in enumerate(stmts.items()):
        tstates[name] = TState(i + 1, [stmt], extract(stmt, cat, granularity),
                               Completion.COMMIT, [1.0], commit_seq=i + 1)
    pairs = assign_tsids([(ts.txn_id, ts.commit_seq) for ts in tstates.values()],
                         FIRST_TSID - 1)
    by_txn = {ts.txn_id: ts for ts in tstates.values()}
    for txn, tsid in pairs:
        by_txn[txn].assign_tsid(tsid)
    return tstates


def build_indexes(granularity: Granularity = Granularity.ALL) -> ConsistencyIndexes:
    idx = ConsistencyIndexes(catalog())
    for ts in write_tstates(granularity).values():
        idx.update(ts)
    return idx


def consistent_tsids(granularity: Granularity = Granularity.ALL) -> dict[str, int]:
    idx = build_indexes(granularity)
    cat = catalog()
    return {name: idx.find_latest_consistent_tsid(extract(stmt, cat, granularity))
            for name, stmt in read_statements(cat).items()}


def report() -> str:
    """Human-readable dump of the example: sets, TSIDs, indexes and read TSIDs."""
    cat = catalog()
    lines = ["# write transactions"]
    for name, ts in write_tstates().items():
        rws = ts.rwset
        lines.append(f"{name} tsid={ts.tsid} class={rws.class_of(ts.statements[0].target_tables[0]).name} "
                     f"sql={ts.write_statements[0]}")
    idx = build_indexes()
    lines.append("# indexes")
    lines.append(idx.dump())
    lines.append("# read transactions")
    for name, stmt in read_statements(cat).items():
        rws = extract(stmt, cat)
        cls = "/".join(sorted({c.name for c in rws.class_per_table.values()}))
        lines.append(f"{name} class={cls} consistent_tsid={idx.find_latest_consistent_tsid(rws)}")
    return "\n".join(lines)
