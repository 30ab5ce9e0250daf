"""Oracle and invariant checks shared by the ``verify`` command and the acceptance tests."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass
from typing import Callable, Optional

from .. import golden
from ..cluster import ClusterConfig, FaultEvent
from ..engine import Engine, EngineError
from ..replay import ParallelScheduler, WatermarkTracker, parallel_replay, serial_replay
from ..rwsets import Granularity, RWSet, extract, extract_all
from ..sqlparse import SchemaCatalog, TableSchema, parse
from ..txmanager import Completion, ConsistencyLevel, LBMode, TState
from .sim import SimParams, run_experiment
from .workload import load_spec


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0
    limit: Optional[float] = None

    @property
    def in_time(self) -> bool:
        return self.limit is None or self.seconds <= self.limit

    def line(self) -> str:
        verdict = "PASS" if self.ok and self.in_time else "FAIL"
        limit = f" (limit {self.limit:g}s)" if self.limit is not None else ""
        return f"{verdict} {self.name}: {self.detail} [{self.seconds:.2f}s{limit}]"


def timed(name: str, limit: Optional[float], fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, ok, detail, time.perf_counter() - t0, limit)


# ---------------------------------------------------------------------------
# 1, 2: worked example

def _sets(rws: RWSet, write: bool):
    tables = set(rws.table_write if write else rws.table_read)
    star = rws.star_write if write else rws.star_read
    cols_src = rws.col_write if write else rws.col_read
    rows_src = rws.row_write if write else rws.row_read
    cols, rows = set(), set()
    for t in tables:
        cols |= {"*"} if star[t] else set(cols_src.get(t, ()))
        rows |= set(rows_src.get(t, ()))
    return tables, cols, rows


def golden_tables() -> tuple[bool, str]:
    problems = []
    tstates = golden.write_tstates()
    for name, ts in tstates.items():
        if ts.tsid != golden.EXPECTED_TSIDS[name]:
            problems.append(f"{name} tsid {ts.tsid}")
        tw, cw, rw = _sets(ts.rwset, True)
        tr, cr, rr = _sets(ts.rwset, False)
        cls = {c.name for c in ts.rwset.class_per_table.values()}
        got = (tw, cw, rw, tr, cr, rr, cls)
        exp = golden.EXPECTED_WRITE_SETS[name]
        if got != exp[:6] + ({exp[6]},):
            problems.append(f"{name} sets {got}")
    idx = golden.build_indexes()
    if idx.t_index != golden.EXPECTED_T_INDEX:
        problems.append(f"t_index {idx.t_index}")
    if idx.c_index != golden.EXPECTED_C_INDEX:
        problems.append(f"c_index {idx.c_index}")
    if idx.r_index != golden.EXPECTED_R_INDEX:
        problems.append(f"r_index {idx.r_index}")
    cat = golden.catalog()
    for name, stmt in golden.read_statements(cat).items():
        rws = extract(stmt, cat)
        tables, cols, rows = _sets(rws, False)
        cls = {c.name for c in rws.class_per_table.values()}
        exp = golden.EXPECTED_READ_SETS[name]
        if (tables, cols, rows, cls) != exp[:3] + ({exp[3]},):
            problems.append(f"{name} read set {(tables, cols, rows, cls)}")
    got = golden.consistent_tsids()
    if got != golden.EXPECTED_CONSISTENT:
        problems.append(f"consistent TSIDs {got}")
    if problems:
        return False, "; ".join(problems)
    return True, "TSIDs 11-15, sets, classes and indexes exact; R1-R4 -> 14/13/12/14"


EXPECTED_TRACE = [("dispatch", 11), ("dispatch", 12), ("enqueue", 13), ("enqueue", 14),
                  ("dispatch", 15), ("complete", 11), ("dispatch", 13), ("complete", 13),
                  ("dispatch", 14)]


def scheduler_trace() -> tuple[bool, str]:
    ts = golden.write_tstates()
    sched = ParallelScheduler(start_tsid=golden.FIRST_TSID - 1, debug=True)
    for name in ("W1", "W2", "W3", "W4", "W5"):
        sched.on_new_transaction(ts[name])
    running = sorted(sched.running)
    queue = [t.tsid for t in sched.wait_queue]
    d1 = [t.tsid for t in sched.on_transaction_complete(11)]
    d3 = [t.tsid for t in sched.on_transaction_complete(13)]
    trace = [(e.kind, e.tsid) for e in sched.trace]
    ok = running == [11, 12, 15] and queue == [13, 14] and d1 == [13] and d3 == [14] \
        and trace == EXPECTED_TRACE
    return ok, f"running={running} queue={queue} after W1 -> {d1}, after W3 -> {d3}"


# ---------------------------------------------------------------------------
# 3: parallel replay equals serial replay

def random_batch(rng: random.Random, max_txns: int = 200):
    """A random schema, its initial image and a TSID-ordered list of TStates.

    TStates come from running random transactions on a Primary, so every
    committed one replays cleanly; failed ones become rollback TStates.
    """
    schemas = []
    for ti in range(rng.randint(2, 5)):
        ncols = rng.randint(2, 4)
        schemas.append(TableSchema(f"T{ti}", ("K",) + tuple(f"C{j}" for j in range(ncols)),
                                   "K", ("int",) * (ncols + 1)))
    cat = SchemaCatalog(schemas)
    primary = Engine(cat)
    seed_rows = [parse(f"INSERT INTO {s.name} VALUES ({k}, {', '.join(str(rng.randint(0, 9)) for _ in s.columns[1:])})", cat)
                 for s in schemas for k in range(8)]
    primary.run(seed_rows)
    image = primary.snapshot_export()

    def stmt_text(s: TableSchema) -> str:
        col = rng.choice(s.columns[1:])
        other = rng.choice(s.columns[1:])
        v, k = rng.randint(0, 9), rng.randint(0, 11)
        kind = rng.random()
        if kind < 0.35:
            return f"UPDATE {s.name} SET {col} = {v} WHERE K = {k}"
        if kind < 0.55:
            return f"UPDATE {s.name} SET {col} = {v} WHERE {other} < {rng.randint(0, 9)}"
        if kind < 0.65:
            return f"DELETE FROM {s.name} WHERE K = {k}"
        if kind < 0.72:
            return f"DELETE FROM {s.name} WHERE {other} = {v}"
        vals = ", ".join(str(rng.randint(0, 9)) for _ in s.columns[1:])
        return f"INSERT INTO {s.name} VALUES ({k}, {vals})"

    tstates = []
    for i in range(rng.randint(1, max_txns)):
        stmts = [parse(stmt_text(rng.choice(schemas)), cat) for _ in range(rng.randint(1, 3))]
        completion = Completion.COMMIT
        if rng.random() < 0.05:
            completion = Completion.ROLLBACK
        else:
            try:
                primary.apply_atomically(stmts)
            except EngineError:
                completion = Completion.ROLLBACK
        ts = TState(i + 1, stmts, extract_all(stmts, cat), completion, [1.0] * len(stmts))
        ts.assign_tsid(i + 1)
        tstates.append(ts)
    return image, tstates, primary.dump_state()


def replay_equivalence(batches: int = 1000, seed: int = 0) -> tuple[bool, str]:
    rng = random.Random(seed)
    mismatches = txns = 0
    for b in range(batches):
        image, tstates, primary_dump = random_batch(rng)
        txns += len(tstates)
        serial = serial_replay(Engine.snapshot_import(image), tstates).dump_state()
        par = parallel_replay(Engine.snapshot_import(image), tstates,
                              rng=random.Random(seed * 100003 + b),
                              workers=rng.choice((1, 2, 4, 8)), debug=True)
        if par.engine.dump_state() != serial or serial != primary_dump \
                or par.applied_tsid != len(tstates):
            mismatches += 1
    return mismatches == 0, f"{batches} batches, {txns} TStates, {mismatches} mismatches"


# ---------------------------------------------------------------------------
# 4: GSSI property suite

def gssi_suite(reads: int = 10000, seed: int = 5) -> tuple[bool, str]:
    spec = load_spec("kv-balanced")
    params = SimParams(prop_delay=6.0)
    txns = int(reads / 0.87) + 500
    rep = run_experiment(ClusterConfig(replicas=3), spec, ConsistencyLevel.GSSI,
                         seed=seed, txns=txns, params=params)
    routed = rep.total.reads_primary + rep.total.reads_replica
    routed_all = sum(p.reads_primary + p.reads_replica for p in rep.phases)
    weak = run_experiment(ClusterConfig(replicas=2), load_spec("adversarial"),
                          ConsistencyLevel.WEAK_SI, seed=seed)
    ok = (rep.gssi_violations == 0 and rep.write_overlap_violations == 0 and routed_all >= reads
          and rep.final_state_equal and weak.staleness >= 1)
    return ok, (f"{routed_all} routed reads ({rep.gssi_checked} replica reads checked against "
                f"the primary snapshot), {rep.gssi_violations} violations; weak-si staleness "
                f"observed {weak.staleness} times (routed in window {routed})")


# ---------------------------------------------------------------------------
# 5: gap-free watermark

def expected_watermarks(order: list[int], start: int = 0) -> list[int]:
    seen, mark, out = set(), start, []
    for t in order:
        seen.add(t)
        while mark + 1 in seen:
            mark += 1
        out.append(mark)
    return out


def watermark_cases(cases: int = 10000, seed: int = 9) -> tuple[bool, str]:
    rng = random.Random(seed)
    failures = 0
    for _ in range(cases):
        n = rng.randint(1, 30)
        order = list(range(1, n + 1))
        rng.shuffle(order)
        tracker = WatermarkTracker()
        got = [tracker.add(t) for t in order]
        # through the scheduler: independent no-op transactions completing out of order
        reported = []
        sched = ParallelScheduler(on_watermark=reported.append)
        for t in range(1, n + 1):
            ts = TState(t, [], RWSet(), Completion.COMMIT)
            ts.assign_tsid(t)
            sched.on_new_transaction(ts)
        for t in order:
            sched.on_transaction_complete(t)
        expect = expected_watermarks(order)
        changes = [w for i, w in enumerate(expect) if w != (expect[i - 1] if i else 0)]
        if got != expect or reported != changes or sorted(set(reported)) != reported:
            failures += 1
    return failures == 0, f"{cases} random completion orders, {failures} failures"


# ---------------------------------------------------------------------------
# 6-8: trend checks

def scalability(seed: int = 1) -> tuple[bool, str]:
    params = SimParams(check_gssi=False)
    ratios = {}
    for mix in ("kv-read-only", "kv-write-heavy"):
        spec = load_spec(mix)
        th = {}
        for n in (1, 8):
            th[n] = run_experiment(ClusterConfig(replicas=n), spec, seed=seed, clients=6 * n,
                                   txns=400 * n, params=params).throughput
        ratios[mix] = th[8] / th[1]
    ok = ratios["kv-read-only"] >= 6.0 and ratios["kv-write-heavy"] < 6.0
    return ok, (f"8 vs 1 replica throughput ratio: read-only {ratios['kv-read-only']:.2f} (>= 6), "
                f"write-heavy {ratios['kv-write-heavy']:.2f} (< 6)")


def statement_lb(seed: int = 11) -> tuple[bool, str]:
    spec = load_spec("order-mix")
    stmt = run_experiment(ClusterConfig(replicas=3), spec, lb=LBMode.STMT, seed=seed)
    txn = run_experiment(ClusterConfig(replicas=3), spec, lb=LBMode.TXN, seed=seed)
    ok = stmt.primary_read_fraction < txn.primary_read_fraction and \
        stmt.throughput >= txn.throughput
    return ok, (f"primary-read fraction stmt {stmt.primary_read_fraction:.3f} vs txn "
                f"{txn.primary_read_fraction:.3f}; throughput stmt {stmt.throughput:.3f} vs "
                f"txn {txn.throughput:.3f}")


def granularity_ablation(seed: int = 7) -> tuple[bool, str]:
    spec = load_spec("kv-balanced")
    th, reps = {}, {}
    for g in (Granularity.ALL, Granularity.CAS, Granularity.TAS):
        reps[g] = run_experiment(ClusterConfig(replicas=3), spec, granularity=g, seed=seed,
                                 params=SimParams(shadow_tas=(g is Granularity.ALL)))
        th[g] = reps[g].throughput
    fine = reps[Granularity.ALL]
    ok = th[Granularity.ALL] >= th[Granularity.CAS] >= th[Granularity.TAS] and \
        fine.granularity_violations == 0 and fine.granularity_checked > 0
    return ok, (f"throughput all {th[Granularity.ALL]:.3f} >= cas {th[Granularity.CAS]:.3f} >= "
                f"tas {th[Granularity.TAS]:.3f}; consistent TSID all <= tas on "
                f"{fine.granularity_checked - fine.granularity_violations}/"
                f"{fine.granularity_checked} routed reads")


# ---------------------------------------------------------------------------
# 9, 10: fault drills and synchronous replication

def fault_drills(seed: int = 7) -> tuple[bool, str]:
    from ..cluster import Cluster
    spec = load_spec("kv-balanced")
    cfg = ClusterConfig(replicas=3)
    base = run_experiment(cfg, spec, seed=seed)
    outage = run_experiment(cfg, spec, seed=seed, faults=[FaultEvent("fail-buffer", 1000),
                                                          FaultEvent("recover-buffer", 1600)])
    change = abs(outage.write_throughput / base.write_throughput - 1.0)
    churn = run_experiment(cfg, spec, seed=seed, faults=[FaultEvent("remove-replica", 800),
                                                         FaultEvent("add-replica", 1800)])
    # TM crash with a complete buffer rebuilds identical indexes
    rng = random.Random(seed)
    eng = golden.seeded_engine(replay_safe=True)
    cluster = Cluster(eng, ClusterConfig(replicas=2, prune_every=7))
    session = cluster.tm.open_session(ConsistencyLevel.GSSI)
    for i in range(60):
        name, sql, params = golden.WRITES[rng.randrange(len(golden.WRITES))]
        session.submit(sql, params)
        if i % 10 == 0:
            cluster.pump()
            cluster.archive_step()
        if i == 30:
            cluster.create_seed()
    before = cluster.tm.indexes.dump()
    cluster.crash_tm()
    rebuilt = cluster.recover_tm() and cluster.tm.indexes.dump() == before
    errors = base.client_errors + outage.client_errors + churn.client_errors
    ok = (errors == 0 and change <= 0.05 and outage.final_state_equal and
          churn.final_state_equal and rebuilt and outage.gssi_violations == 0)
    return ok, (f"client errors {errors}; buffer outage write-throughput change {change:.2%} "
                f"(<= 5%); replica remove/re-add converged={churn.final_state_equal}; "
                f"TM indexes rebuilt identical={rebuilt}")


def one_sr(txns: int = 5000, seed: int = 3) -> tuple[bool, str]:
    rep = run_experiment(ClusterConfig(replicas=2), load_spec("kv-balanced"),
                         ConsistencyLevel.ONE_SR, seed=seed, txns=txns,
                         params=SimParams(check_gssi=False))
    ok = rep.one_sr_violations == 0 and rep.one_sr_checked > 0
    return ok, (f"{rep.one_sr_checked} write acknowledgments over {txns} transactions, "
                f"{rep.one_sr_violations} with a replica behind")


CRITERIA = [
    ("criterion 1 golden tables", 1.0, golden_tables),
    ("criterion 2 scheduler trace", 1.0, scheduler_trace),
    ("criterion 3 parallel equals serial replay", 120.0, replay_equivalence),
    ("criterion 4 GSSI property suite", 60.0, gssi_suite),
    ("criterion 5 gap-free watermark", 10.0, watermark_cases),
    ("criterion 6 scalability trend", 60.0, scalability),
    ("criterion 7 statement-level balancing", 60.0, statement_lb),
    ("criterion 8 granularity ablation", 60.0, granularity_ablation),
    ("criterion 9 fault drills", 60.0, fault_drills),
    ("criterion 10 synchronous replication", 30.0, one_sr),
]


def run_all(quick: bool = False) -> list[CheckResult]:
    out = []
    for name, limit, fn in CRITERIA:
        if quick and fn is replay_equivalence:
            out.append(timed(name, None, lambda: replay_equivalence(batches=50)))
        else:
            out.append(timed(name, limit, fn))
    return out
