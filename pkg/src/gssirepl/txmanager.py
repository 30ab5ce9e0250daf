"""Transaction Manager: Primary execution, TSID issuance, consistency indexes, routing."""

from __future__ import annotations

import itertools
import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional, Sequence, Union

from .engine import Engine, EngineError, EngineTxn, ResultSet, WriteWriteConflict
from .rwsets import (AffectingClass, Granularity, RWSet, are_independent, extract,
                     merge_into)
from .sqlparse import (Statement, StatementKind, bind, parse, render, render_literal,
                       rewrite_nondeterministic)

log = logging.getLogger(__name__)


class Completion(Enum):
    COMMIT = "commit"
    ROLLBACK = "rollback"


class ConsistencyLevel(Enum):
    WEAK_SI = "weak-si"
    GSSI = "gssi"
    RSI_PC = "rsi-pc"
    ONE_SR = "1sr"


class LBMode(Enum):
    TXN = "txn"
    STMT = "stmt"


class DuplicateCompletion(Exception):
    pass


class NoTargetAvailable(Exception):
    pass


class UnknownReplica(KeyError):
    pass


class ReplicaUnavailable(Exception):
    """A routed read could not run on its replica (removed or failed)."""


class BufferUnavailable(Exception):
    pass


@dataclass
class TState:
    """The replicable record of one completed write transaction."""

    txn_id: int
    statements: list
    rwset: RWSet
    completion: Completion
    stmt_costs: list = field(default_factory=list)
    commit_seq: Optional[int] = None
    tsid: Optional[int] = None

    @property
    def write_statements(self) -> list[str]:
        return [render(s) for s in self.statements]

    @property
    def exec_time(self) -> float:
        return float(sum(self.stmt_costs))

    @property
    def is_rollback(self) -> bool:
        return self.completion is Completion.ROLLBACK

    def assign_tsid(self, tsid: int) -> None:
        if self.tsid is not None:
            raise DuplicateCompletion(f"txn {self.txn_id} already has TSID {self.tsid}")
        self.tsid = tsid


def assign_tsids(completed: Sequence[tuple], last_tsid: int) -> list[tuple]:
    """Issue consecutive TSIDs after *last_tsid* in commit-timestamp order.

    *completed* holds ``(txn_id, commit_timestamp)`` pairs; equal timestamps
    are ordered by transaction id.
    """
    ids = [c[0] for c in completed]
    if len(set(ids)) != len(ids):
        raise DuplicateCompletion("a transaction appears twice in one completion batch")
    ordered = sorted(completed, key=lambda c: (c[1], c[0]))
    return [(txn, last_tsid + i) for i, (txn, _) in enumerate(ordered, start=1)]


# ---------------------------------------------------------------------------
# consistency indexes

class ConsistencyIndexes:
    """Tables, columns and rows mapped to the TSID that last modified them."""

    def __init__(self, catalog):
        self.catalog = catalog
        self.t_index: dict[str, int] = {}
        self.c_index: dict[str, int] = {}
        self.r_index: dict[str, dict] = {}
        self.row_hwm: dict[str, int] = {}
        self.latest = 0
        self.pruned_upto = 0

    def _columns(self, table: str, cols: Iterable[str], star: bool) -> set[str]:
        out = set(cols)
        if star:
            out.update(f"{table}.{c}" for c in self.catalog.get(table).columns)
        return out

    def update(self, ts: TState) -> None:
        if ts.is_rollback:
            self.latest = max(self.latest, ts.tsid)
            return
        tsid = ts.tsid
        rws = ts.rwset
        for t in rws.table_write:
            self.t_index[t] = tsid
        for t in rws.table_write:
            cls = rws.class_of(t)
            if cls in (AffectingClass.TAS, AffectingClass.CAS):
                for c in self._columns(t, rws.col_write.get(t, ()), bool(rws.star_write[t])):
                    self.c_index[c] = tsid
            elif cls is AffectingClass.RAS:
                rows = self.r_index.setdefault(t, {})
                for r in rws.row_write.get(t, ()):
                    rows[r] = tsid
                if rws.row_write.get(t):
                    self.row_hwm[t] = tsid
        self.latest = max(self.latest, tsid)

    def find_latest_consistent_tsid(self, rws: RWSet) -> int:
        tsid = 0
        for t in rws.table_read:
            if t not in self.t_index:
                continue
            cls = rws.class_of(t)
            if cls is AffectingClass.TAS:
                tsid = max(tsid, self.t_index[t])
                continue
            cols = self._columns(t, rws.col_read.get(t, ()), bool(rws.star_read[t]))
            col_max = max((self.c_index.get(c, 0) for c in cols), default=0)
            if cls is AffectingClass.CAS:
                tsid = max(tsid, col_max, self.row_hwm.get(t, 0))
            elif cls is AffectingClass.RAS:
                rows = self.r_index.get(t, {})
                row_max = max((rows.get(r, 0) for r in rws.row_read.get(t, ())), default=0)
                tsid = max(tsid, row_max, col_max)
        return tsid

    def prune(self, floor: int) -> int:
        """Drop row entries at or below *floor*; returns how many were removed."""
        removed = 0
        for t, rows in self.r_index.items():
            stale = [r for r, v in rows.items() if v <= floor]
            for r in stale:
                del rows[r]
            removed += len(stale)
        self.r_index = {t: rows for t, rows in self.r_index.items() if rows}
        self.pruned_upto = max(self.pruned_upto, floor)
        return removed

    def dump(self) -> str:
        lines = [f"T|{t}|{v}" for t, v in self.t_index.items()]
        lines += [f"C|{c}|{v}" for c, v in self.c_index.items()]
        for t, rows in self.r_index.items():
            lines += [f"R|{t}.{c}={render_literal(val)}|{v}" for (c, val), v in rows.items()]
        lines += [f"H|{t}|{v}" for t, v in self.row_hwm.items()]
        return "\n".join(sorted(lines))

    def __eq__(self, other) -> bool:
        return isinstance(other, ConsistencyIndexes) and self.dump() == other.dump()

    def copy(self) -> "ConsistencyIndexes":
        out = ConsistencyIndexes(self.catalog)
        out.t_index = dict(self.t_index)
        out.c_index = dict(self.c_index)
        out.r_index = {t: dict(r) for t, r in self.r_index.items()}
        out.row_hwm = dict(self.row_hwm)
        out.latest = self.latest
        out.pruned_upto = self.pruned_upto
        return out


# ---------------------------------------------------------------------------
# routing

@dataclass
class ReplicaState:
    replica_id: int
    applied_tsid: int = 0
    active_reads: int = 0
    alive: bool = True

    def advance(self, tsid: int) -> None:
        if tsid < self.applied_tsid:
            raise ValueError(f"replica {self.replica_id}: watermark regressed "
                             f"{self.applied_tsid} -> {tsid}")
        self.applied_tsid = tsid


@dataclass(frozen=True)
class RoutingDecision:
    target: str  # "primary" | "replica" | "wait"
    replica_id: Optional[int] = None
    required_tsid: int = 0

    @property
    def is_primary(self) -> bool:
        return self.target == "primary"

    @property
    def is_wait(self) -> bool:
        return self.target == "wait"


def _least_loaded(replicas: Iterable[ReplicaState]) -> Optional[ReplicaState]:
    best = None
    for r in replicas:
        if best is None or (r.active_reads, r.replica_id) < (best.active_reads, best.replica_id):
            best = r
    return best


def choose_target(required_tsid: int, level: ConsistencyLevel,
                  replicas: Iterable[ReplicaState], latest_tsid: int) -> RoutingDecision:
    """Pick a target given the TSID a read must observe."""
    alive = [r for r in replicas if r.alive]
    if level in (ConsistencyLevel.WEAK_SI, ConsistencyLevel.ONE_SR):
        pick = _least_loaded(alive)
    elif level is ConsistencyLevel.GSSI:
        pick = _least_loaded(r for r in alive if r.applied_tsid >= required_tsid)
    else:
        if not alive:
            return RoutingDecision("primary", required_tsid=latest_tsid)
        pick = _least_loaded(r for r in alive if r.applied_tsid >= latest_tsid)
        if pick is None:
            return RoutingDecision("wait", required_tsid=latest_tsid)
        return RoutingDecision("replica", pick.replica_id, latest_tsid)
    if pick is None:
        return RoutingDecision("primary", required_tsid=required_tsid)
    return RoutingDecision("replica", pick.replica_id, required_tsid)


def route_read(read_rwset: RWSet, level: ConsistencyLevel, replicas: Iterable[ReplicaState],
               indexes: ConsistencyIndexes, latest_tsid: int) -> RoutingDecision:
    required = indexes.find_latest_consistent_tsid(read_rwset)
    return choose_target(required, level, replicas, latest_tsid)


def route_statement_in_write_txn(stmt_rwset: RWSet, txn_running_state: RWSet,
                                 level: ConsistencyLevel, replicas: Iterable[ReplicaState],
                                 indexes: ConsistencyIndexes, latest_tsid: int,
                                 lb: LBMode = LBMode.STMT) -> RoutingDecision:
    if lb is LBMode.TXN or not are_independent(txn_running_state, stmt_rwset):
        return RoutingDecision("primary")
    return route_read(stmt_rwset, level, replicas, indexes, latest_tsid)


# ---------------------------------------------------------------------------
# transaction manager

@dataclass
class WriteTxn:
    """A client transaction executing on the Primary."""

    session: "Session"
    engine_txn: EngineTxn
    statements: list = field(default_factory=list)
    stmt_costs: list = field(default_factory=list)
    running: RWSet = field(default_factory=RWSet)
    failed: bool = False

    @property
    def txn_id(self) -> int:
        return self.engine_txn.txn_id

    @property
    def has_writes(self) -> bool:
        return bool(self.statements)


@dataclass
class _Pending:
    tstate: TState
    key: tuple


@dataclass
class TxnOutcome:
    committed: bool
    results: list
    tstate: Optional[TState] = None
    error: Optional[Exception] = None


StatementLike = Union[str, Statement]


class TransactionManager:
    """Intercepts client transactions and keeps replicas and indexes in step.

    ``buffer`` is any object with ``publish(tstate)`` (raising
    :class:`BufferUnavailable` while down) and ``put_meta(key, value)``.
    Without one, TStates are kept in :attr:`log`.
    """

    def __init__(self, primary: Engine, buffer=None, *, granularity: Granularity = Granularity.ALL,
                 prune_every: int = 1000, clock: Optional[Callable[[], int]] = None,
                 rng=None, debug: bool = False):
        import random
        self.primary = primary
        self.catalog = primary.catalog
        self.buffer = buffer
        self.granularity = granularity
        self.prune_every = prune_every
        self.clock = clock or (lambda: int(time.time()))
        self.rng = rng or random.Random(0)
        self.debug = debug
        self.indexes = ConsistencyIndexes(self.catalog)
        self.latest_tsid = 0
        self.published_seq = primary.latest_seq
        self.tsid_seq: dict[int, int] = {}
        self.replicas: dict[int, ReplicaState] = {}
        self.replica_engines: dict[int, Engine] = {}
        self.retained: dict[int, TState] = {}
        self.log: list[TState] = []
        self.completed: dict[int, TState] = {}
        self.metrics: Counter = Counter()
        self.wait_hook: Optional[Callable[[Callable[[], bool]], None]] = None
        self.wait_timeout = 30.0
        self._pending: dict[int, _Pending] = {}
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._session_ids = itertools.count(1)
        self._listeners: list[Callable[[TState], None]] = []

    # -- replica bookkeeping
    def register_replica(self, rid: int, engine: Optional[Engine], applied_tsid: int = 0) -> ReplicaState:
        with self._lock:
            state = ReplicaState(rid, applied_tsid)
            self.replicas[rid] = state
            if engine is not None:
                self.replica_engines[rid] = engine
            self._cond.notify_all()
            return state

    def unregister_replica(self, rid: int) -> ReplicaState:
        with self._lock:
            if rid not in self.replicas:
                raise UnknownReplica(rid)
            self.replica_engines.pop(rid, None)
            state = self.replicas.pop(rid)
            state.alive = False
            self._cond.notify_all()
            return state

    def report_watermark(self, rid: int, tsid: int) -> None:
        with self._lock:
            state = self.replicas.get(rid)
            if state is None:
                return
            state.advance(tsid)
            self._cond.notify_all()

    def min_watermark(self) -> int:
        alive = [r.applied_tsid for r in self.replicas.values() if r.alive]
        return min(alive) if alive else 0

    def on_publish(self, fn: Callable[[TState], None]) -> None:
        self._listeners.append(fn)

    # -- statement preparation
    def prepare(self, stmt: StatementLike, params: Sequence = ()) -> Statement:
        if isinstance(stmt, str):
            stmt = parse(stmt, self.catalog)
        if params:
            stmt = bind(stmt, params)
        return rewrite_nondeterministic(stmt, self.clock, self.rng)

    def analyze(self, stmt: Statement) -> RWSet:
        return extract(stmt, self.catalog, self.granularity)

    def analyze_all(self, stmts: Iterable[Statement]) -> RWSet:
        acc = RWSet()
        for s in stmts:
            merge_into(acc, self.analyze(s))
        return acc

    # -- routing
    def find_latest_consistent_tsid(self, rws: RWSet) -> int:
        with self._lock:
            return self.indexes.find_latest_consistent_tsid(rws)

    def route_read(self, rws: RWSet, level: ConsistencyLevel) -> RoutingDecision:
        with self._lock:
            return route_read(rws, level, self.replicas.values(), self.indexes, self.latest_tsid)

    def route_in_write_txn(self, rws: RWSet, wtxn: WriteTxn, level: ConsistencyLevel,
                           lb: LBMode) -> RoutingDecision:
        with self._lock:
            return route_statement_in_write_txn(rws, wtxn.running, level, self.replicas.values(),
                                                self.indexes, self.latest_tsid, lb)

    def count_route(self, decision: RoutingDecision) -> None:
        if decision.is_primary:
            self.metrics["reads_primary"] += 1
        elif decision.is_wait:
            self.metrics["waits"] += 1
        else:
            self.metrics["reads_replica"] += 1

    # -- primary write path
    def begin_write(self, session: "Session") -> WriteTxn:
        return WriteTxn(session, self.primary.begin())

    def execute_write(self, wtxn: WriteTxn, stmt: Statement) -> ResultSet:
        """Run a write (or a Primary-routed read) inside *wtxn*."""
        try:
            res = self.primary.execute(wtxn.engine_txn, stmt)
        except EngineError:
            wtxn.failed = True
            raise
        if stmt.is_write:
            wtxn.statements.append(stmt)
            wtxn.stmt_costs.append(res.cost)
            merge_into(wtxn.running, self.analyze(stmt))
        return res

    def request_commit(self, wtxn: WriteTxn, rollback: bool = False) -> Optional[TState]:
        """Finish *wtxn* on the Primary and register it as awaiting its TSID.

        Returns the pending TState, or None for transactions without writes.
        """
        etxn = wtxn.engine_txn
        completion = Completion.COMMIT
        if rollback or wtxn.failed:
            self.primary.rollback(etxn)
            completion = Completion.ROLLBACK
        else:
            try:
                self.primary.commit(etxn)
            except WriteWriteConflict:
                completion = Completion.ROLLBACK
        if not wtxn.has_writes:
            if completion is Completion.ROLLBACK and not rollback:
                self.metrics["aborts"] += 1
            return None
        with self._lock:
            if completion is Completion.COMMIT:
                ts_key = (etxn.commit_seq, 0 if etxn.versioned else 1, wtxn.txn_id)
                seq = etxn.commit_seq
            else:
                ts_key = (self.primary.latest_seq, 1, wtxn.txn_id)
                seq = None
                self.metrics["aborts"] += 1
            ts = TState(wtxn.txn_id, list(wtxn.statements), wtxn.running, completion,
                        list(wtxn.stmt_costs), seq)
            if wtxn.txn_id in self._pending or wtxn.txn_id in self.completed:
                raise DuplicateCompletion(wtxn.txn_id)
            self._pending[wtxn.txn_id] = _Pending(ts, ts_key)
            return ts

    def acknowledge(self, txn_id: int) -> list[TState]:
        """Commit response for *txn_id* arrived: issue TSIDs, index, publish.

        Every pending transaction whose commit timestamp precedes this one is
        issued a TSID first.  Returns the TStates issued in this step.
        """
        with self._lock:
            if txn_id in self.completed:
                return []
            me = self._pending.get(txn_id)
            if me is None:
                raise KeyError(f"txn {txn_id} is not awaiting completion")
            batch = [p for p in self._pending.values() if p.key <= me.key]
            pairs = assign_tsids([(p.tstate.txn_id, p.key) for p in batch], self.latest_tsid)
            by_id = {p.tstate.txn_id: p.tstate for p in batch}
            issued = []
            for txn, tsid in pairs:
                ts = by_id[txn]
                del self._pending[txn]
                ts.assign_tsid(tsid)
                self._install(ts)
                issued.append(ts)
            return issued

    def _install(self, ts: TState) -> None:
        # caller holds the lock: TSID issue, index update and publish are one step
        self.latest_tsid = ts.tsid
        self.indexes.update(ts)
        if ts.commit_seq is not None:
            self.published_seq = max(self.published_seq, ts.commit_seq)
        self.tsid_seq[ts.tsid] = self.published_seq
        self.completed[ts.txn_id] = ts
        if self.debug:
            assert self.indexes.latest == ts.tsid
        self._publish(ts)
        if self.prune_every and ts.tsid % self.prune_every == 0:
            floor = self.min_watermark()
            self.indexes.prune(floor)
            self._put_meta("pruned_upto", self.indexes.pruned_upto)
        for fn in self._listeners:
            fn(ts)
        self._cond.notify_all()

    def _publish(self, ts: TState) -> None:
        if self.buffer is None:
            self.log.append(ts)
            return
        if self.retained:
            self.retained[ts.tsid] = ts
            self.flush_retained()
            return
        try:
            self.buffer.publish(ts)
        except BufferUnavailable:
            self.retained[ts.tsid] = ts

    def _put_meta(self, key: str, value) -> None:
        if self.buffer is None:
            return
        try:
            self.buffer.put_meta(key, value)
        except BufferUnavailable:
            self._meta_pending = (key, value)

    def flush_retained(self) -> int:
        """Push TStates held back during a buffer outage; returns how many went out."""
        with self._lock:
            sent = 0
            for tsid in sorted(self.retained):
                try:
                    self.buffer.publish(self.retained[tsid])
                except BufferUnavailable:
                    break
                del self.retained[tsid]
                sent += 1
            pending_meta = getattr(self, "_meta_pending", None)
            if pending_meta and not self.retained:
                self._meta_pending = None
                self._put_meta(*pending_meta)
            return sent

    # -- synchronous driving (no simulator)
    def open_session(self, level: ConsistencyLevel = ConsistencyLevel.GSSI,
                     lb: LBMode = LBMode.STMT) -> "Session":
        return Session(self, level, lb, next(self._session_ids))

    def _wait(self, predicate: Callable[[], bool]) -> None:
        if predicate():
            return
        if self.wait_hook is not None:
            self.wait_hook(predicate)
            if not predicate():
                raise NoTargetAvailable("condition not reached after driving replicas")
            return
        with self._cond:
            if not self._cond.wait_for(predicate, timeout=self.wait_timeout):
                raise NoTargetAvailable("timed out waiting for replicas")

    def _resolve(self, decide: Callable[[], RoutingDecision]) -> RoutingDecision:
        decision = decide()
        self.count_route(decision)
        if decision.is_wait:
            box = []

            def ready():
                d = decide()
                if not d.is_wait:
                    box.append(d)
                    return True
                return False

            self._wait(ready)
            decision = box[-1]
            self.count_route(decision)
        return decision

    def run_reads(self, decision: RoutingDecision, stmts: Sequence[Statement]) -> list[ResultSet]:
        """Execute read statements on the routed target in one snapshot."""
        if decision.is_primary:
            return self.primary.run(stmts, snapshot_seq=self.published_seq)
        rid = decision.replica_id
        with self._lock:
            state = self.replicas.get(rid)
            engine = self.replica_engines.get(rid)
            if state is None or engine is None or not state.alive:
                raise ReplicaUnavailable(rid)
            state.active_reads += 1
        try:
            return engine.run(stmts)
        finally:
            with self._lock:
                state.active_reads -= 1

    def _routed_reads(self, decide: Callable[[], RoutingDecision],
                      stmts: Sequence[Statement]) -> list[ResultSet]:
        for _ in range(len(self.replicas) + 2):
            decision = self._resolve(decide)
            try:
                return self.run_reads(decision, stmts)
            except ReplicaUnavailable:
                self.metrics["resubmits"] += 1
        raise NoTargetAvailable("read could not be placed")

    def commit_write(self, wtxn: WriteTxn, rollback: bool = False) -> Optional[TState]:
        ts = self.request_commit(wtxn, rollback)
        if ts is None:
            return None
        self.acknowledge(ts.txn_id)
        if wtxn.session.level is ConsistencyLevel.ONE_SR and ts.tsid is not None:
            tsid = ts.tsid
            self._wait(lambda: all(r.applied_tsid >= tsid
                                   for r in self.replicas.values() if r.alive))
        return ts

    def run_transaction(self, session: "Session", statements: Sequence[StatementLike],
                        params: Sequence[Sequence] = ()) -> TxnOutcome:
        stmts = [self.prepare(s, params[i] if i < len(params) else ())
                 for i, s in enumerate(statements)]
        stmts = [s for s in stmts if not s.kind.is_control]
        level = session.level
        if all(s.is_read for s in stmts):
            rws = self.analyze_all(stmts)
            results = self._routed_reads(lambda: self.route_read(rws, level), stmts)
            return TxnOutcome(True, results)
        wtxn = self.begin_write(session)
        results = []
        try:
            for s in stmts:
                if s.is_read:
                    results.append(self.read_in_txn(wtxn, s))
                else:
                    results.append(self.execute_write(wtxn, s))
        except EngineError as exc:
            ts = self.commit_write(wtxn, rollback=True)
            return TxnOutcome(False, results, ts, exc)
        ts = self.commit_write(wtxn)
        committed = ts is None or ts.completion is Completion.COMMIT
        return TxnOutcome(committed, results, ts)

    def read_in_txn(self, wtxn: WriteTxn, stmt: Statement) -> ResultSet:
        """A read inside a write transaction: a replica if allowed, else the txn itself."""
        session = wtxn.session
        if session.lb is LBMode.STMT:
            rws = self.analyze(stmt)
            for _ in range(len(self.replicas) + 2):
                decision = self._resolve(
                    lambda: self.route_in_write_txn(rws, wtxn, session.level, session.lb))
                if decision.is_primary:
                    break
                try:
                    return self.run_reads(decision, [stmt])[0]
                except ReplicaUnavailable:
                    self.metrics["resubmits"] += 1
        else:
            self.count_route(RoutingDecision("primary"))
        # on the Primary the read joins the write transaction to see its own writes
        return self.execute_write(wtxn, stmt)


class Session:
    """Client session bound to one consistency level and load-balancing mode."""

    def __init__(self, tm: TransactionManager, level: ConsistencyLevel, lb: LBMode, sid: int):
        self.tm = tm
        self.level = level
        self.lb = lb
        self.session_id = sid
        self.txn: Optional[WriteTxn] = None
        self.closed = False

    def submit(self, stmt: StatementLike, params: Sequence = ()) -> Optional[ResultSet]:
        if self.closed:
            raise RuntimeError("session closed")
        tm = self.tm
        s = tm.prepare(stmt, params)
        if s.kind is StatementKind.BEGIN:
            if self.txn is None:
                self.txn = tm.begin_write(self)
            return None
        if s.kind is StatementKind.COMMIT:
            self.commit()
            return None
        if s.kind is StatementKind.ROLLBACK:
            self.rollback()
            return None
        if self.txn is None:
            outcome = tm.run_transaction(self, [s])
            if outcome.error is not None:
                raise outcome.error
            return outcome.results[0] if outcome.results else None
        wtxn = self.txn
        try:
            return tm.read_in_txn(wtxn, s) if s.is_read else tm.execute_write(wtxn, s)
        except EngineError:
            self.txn = None
            tm.commit_write(wtxn, rollback=True)
            raise

    def commit(self) -> Optional[TState]:
        if self.txn is None:
            return None
        wtxn, self.txn = self.txn, None
        ts = self.tm.commit_write(wtxn)
        if ts is not None and ts.is_rollback:
            raise WriteWriteConflict(f"txn {wtxn.txn_id} aborted at commit")
        return ts

    def rollback(self) -> Optional[TState]:
        if self.txn is None:
            return None
        wtxn, self.txn = self.txn, None
        return self.tm.commit_write(wtxn, rollback=True)

    def close(self) -> None:
        if self.txn is not None:
            self.rollback()
        self.closed = True
