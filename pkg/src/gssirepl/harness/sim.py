"""Deterministic discrete-event simulation of a full cluster under client load.

Time is logical.  Every node is a FIFO server with a fixed number of slots;
service time is engine cost units times ``unit_time``.  Statements execute
against the real engines at the moment they are routed or start service, so
the online checkers compare actual results.
"""

from __future__ import annotations

import heapq
import itertools
import logging
import random
from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional

from ..cluster import Cluster, ClusterConfig, FaultEvent
from ..engine import Engine, EngineError
from ..replay import ReplayFailure, serial_replay
from ..rwsets import Granularity, RWSet, degrade
from ..txmanager import (Completion, ConsistencyIndexes, ConsistencyLevel, LBMode,
                         RoutingDecision, TState)
from .metrics import InvariantViolation, MetricsReport, PhaseStats
from .workload import TxnRequest, WorkloadSpec, build_engine, generate

log = logging.getLogger(__name__)


@dataclass
class SimParams:
    hop: float = 0.5             # one-way client/node delay
    unit_time: float = 1.0       # time per engine cost unit
    commit_cost: float = 1.0
    primary_slots: int = 4
    replica_slots: int = 4
    prop_delay: float = 3.0      # buffer to replica
    ack_delay: float = 0.2       # commit response back to the TM
    reorder_prob: float = 0.02   # share of commit responses that arrive late
    reorder_extra: float = 1.5
    warmup: float = 0.1          # share of transactions excluded from totals
    check_gssi: bool = True
    check_no_loss: bool = True
    shadow_tas: bool = False     # compare every routed read against a table-only index
    history: int = 50            # events kept for forensic dumps


@dataclass(eq=False)
class Job:
    start: Callable[[], float]
    finish: Callable[[], None]
    fail: Callable[[], None]
    kind: str = "read"


class Node:
    """FIFO server with ``slots`` parallel service positions."""

    def __init__(self, sim: "Simulation", name: str, slots: int):
        self.sim, self.name, self.slots = sim, name, slots
        self.queue: deque = deque()
        self.busy: set = set()
        self.alive = True
        self.served = 0

    def submit(self, job: Job) -> None:
        if not self.alive:
            job.fail()
            return
        self.queue.append(job)
        self._pump()

    def _pump(self) -> None:
        while self.alive and self.queue and len(self.busy) < self.slots:
            job = self.queue.popleft()
            self.busy.add(job)
            dur = job.start()
            self.sim.after(dur, lambda job=job: self._done(job))

    def _done(self, job: Job) -> None:
        if job not in self.busy:
            return
        self.busy.discard(job)
        self.served += 1
        job.finish()
        self._pump()

    def fail_all(self) -> None:
        jobs = list(self.busy) + list(self.queue)
        self.busy.clear()
        self.queue.clear()
        self.alive = False
        for job in jobs:
            job.fail()


class _Client:
    """Closed-loop client executing one transaction at a time, statement by statement."""

    def __init__(self, sim: "Simulation", cid: int):
        self.sim, self.cid = sim, cid
        self.req: Optional[TxnRequest] = None

    def next(self) -> None:
        req = self.sim.next_request()
        if req is None:
            return
        self.req = req
        self.t0 = self.sim.now
        self.i = 0
        self.wtxn = None
        self.failed = False
        if req.read_only:
            self.read_txn()
        else:
            self.step()

    # -- read-only transactions
    def read_txn(self) -> None:
        sim, tm = self.sim, self.sim.tm
        stmts = self.req.statements
        rws = tm.analyze_all(stmts)
        decision = sim.route(rws, lambda: tm.route_read(rws, sim.level), len(stmts))
        if decision is None:
            sim.park(lambda: not tm.route_read(rws, sim.level).is_wait, self.read_txn)
            return
        cost = sim.execute_reads(decision, stmts, rws)
        sim.send(decision, cost, finish=lambda: self.respond(True), fail=self.resubmit_read)

    def resubmit_read(self) -> None:
        self.sim.report.resubmits += 1
        self.read_txn()

    # -- write transactions
    def step(self) -> None:
        sim, tm = self.sim, self.sim.tm
        stmts = self.req.statements
        if self.failed or self.i == len(stmts):
            self.commit()
            return
        s = stmts[self.i]
        if s.is_read and sim.lb is LBMode.STMT:
            rws = tm.analyze(s)
            running = self.wtxn.running if self.wtxn is not None else RWSet()
            decide = lambda: sim.route_in_txn(rws, running)
            decision = sim.route(rws, decide, 1)
            if decision is None:
                sim.park(lambda: not decide().is_wait, self.step)
                return
            if not decision.is_primary:
                cost = sim.execute_reads(decision, [s], rws)
                sim.send(decision, cost, finish=self.advance, fail=self.step)
                return
        elif s.is_read:
            sim.count(RoutingDecision("primary"), 1)
        self.primary_statement(s)

    def advance(self) -> None:
        self.i += 1
        self.step()

    def primary_statement(self, stmt) -> None:
        sim, tm = self.sim, self.sim.tm

        def start() -> float:
            if self.wtxn is None:
                self.wtxn = tm.begin_write(None)
            try:
                res = tm.execute_write(self.wtxn, stmt)
            except EngineError:
                self.failed = True
                return sim.params.unit_time
            return res.cost * sim.params.unit_time

        sim.after(sim.params.hop, lambda: sim.primary.submit(
            Job(start, lambda: sim.after(sim.params.hop, self.advance), sim.fatal, "stmt")))

    def commit(self) -> None:
        sim, tm = self.sim, self.sim.tm
        wtxn = self.wtxn

        def finish() -> None:
            ts = tm.request_commit(wtxn, rollback=self.failed)
            if ts is None:
                sim.after(sim.params.hop, lambda: self.respond(not self.failed))
                return
            sim.recorder_commit(wtxn)
            delay = sim.params.ack_delay
            if sim.rng.random() < sim.params.reorder_prob:
                delay += sim.params.reorder_extra
            sim.after(delay, lambda: self.acked(ts))

        if wtxn is None:
            self.respond(False)
            return
        sim.after(sim.params.hop, lambda: sim.primary.submit(
            Job(lambda: sim.params.commit_cost * sim.params.unit_time, finish, sim.fatal, "commit")))

    def acked(self, ts: TState) -> None:
        sim = self.sim
        sim.acknowledge(ts.txn_id)
        ok = ts.completion is Completion.COMMIT
        if sim.level is ConsistencyLevel.ONE_SR and ts.tsid is not None:
            tsid = ts.tsid

            def covered() -> bool:
                return all(r.applied_tsid >= tsid for r in sim.tm.replicas.values() if r.alive)

            def release() -> None:
                sim.report.one_sr_checked += 1
                if not covered():
                    sim.report.one_sr_violations += 1
                sim.after(sim.params.hop, lambda: self.respond(ok, write=True))

            sim.park(covered, release)
            return
        sim.after(sim.params.hop, lambda: self.respond(ok, write=True))

    def respond(self, committed: bool, write: bool = False) -> None:
        self.sim.complete(self, committed, write and committed, self.sim.now - self.t0)
        self.next()


class Simulation:
    def __init__(self, config: ClusterConfig, spec: WorkloadSpec,
                 level: ConsistencyLevel = ConsistencyLevel.GSSI, lb: LBMode = LBMode.STMT,
                 faults: Iterable[FaultEvent] = (), *, seed: Optional[int] = None,
                 params: Optional[SimParams] = None, clients: Optional[int] = None,
                 txns: Optional[int] = None, label: str = "run"):
        self.params = params or SimParams()
        self.config = config
        self.level = level
        self.lb = lb
        self.seed = spec.seed if seed is None else seed
        self.spec = spec
        self.rng = random.Random(self.seed * 7919 + 1)
        self.now = 0.0
        self._events: list = []
        self._ids = itertools.count()
        self.history: deque = deque(maxlen=self.params.history)
        primary = build_engine(spec, replay_safe=True)
        self.initial_image = primary.snapshot_export()
        self.cluster = Cluster(primary, config, clock=lambda: int(self.now),
                               rng=random.Random(self.seed))
        self.tm = self.cluster.tm
        self.primary_engine = primary
        self.primary = Node(self, "primary", self.params.primary_slots)
        self.nodes: dict[int, Node] = {rid: Node(self, f"replica{rid}", self.params.replica_slots)
                                       for rid in self.cluster.replicas}
        n = spec.txns if txns is None else txns
        self.requests = generate(spec.copy(txns=n), self.seed)
        self.total_txns = n
        self.issued = 0
        self.completed = 0
        self.clients = [_Client(self, c) for c in range(clients or spec.clients)]
        self.faults = sorted(faults, key=lambda f: f.at)
        self.waiters: list = []
        self.announced = 0
        self._tail = False
        self.report = MetricsReport(label)
        self.warmup_after = int(n * self.params.warmup)
        self.phase = PhaseStats("steady", 0.0)
        self.total: Optional[PhaseStats] = None
        self.last_done = 0.0
        self._route_base = self._route_snapshot()
        self._commits: list = []  # (commit_seq, snapshot_seq, keys) of versioned commits
        self._lag_sum = 0.0
        self._lag_n = 0
        self.tstate_log: list[TState] = []
        self.tm.on_publish(self.tstate_log.append)
        self.shadow = None
        if self.params.shadow_tas:
            self.shadow = ConsistencyIndexes(self.tm.catalog)
            self.tm.on_publish(self._shadow_update)

    # -- event loop
    def after(self, delay: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._events, (self.now + max(delay, 0.0), next(self._ids), fn))

    def run(self) -> MetricsReport:
        for k, c in enumerate(self.clients):
            self.after(0.001 * k, c.next)
        while self._events:
            t, eid, fn = heapq.heappop(self._events)
            self.now = t
            self.history.append((round(t, 6), eid, getattr(fn, "__qualname__", "?")))
            fn()
            if self.params.check_no_loss:
                self._check_no_loss()
            if self.completed >= self.total_txns and not self._events and not self._tail:
                self._tail = True
                self._drain_tail()
        return self._finish()

    def _drain_tail(self) -> None:
        # end of workload: heal outstanding faults so replication can converge
        if self.cluster.buffer.failed:
            self.cluster.recover_buffer()
        self.announce(force=True)

    def fatal(self) -> None:
        raise InvariantViolation("primary job failed", self.forensics())

    def forensics(self) -> str:
        lines = [f"t={self.now} latest_tsid={self.tm.latest_tsid} "
                 f"watermarks={ {r: s.applied_tsid for r, s in self.tm.replicas.items()} }"]
        lines += [f"  {t} #{eid} {name}" for t, eid, name in self.history]
        return "\n".join(lines)

    # -- requests and completions
    def next_request(self) -> Optional[TxnRequest]:
        if self.issued >= self.total_txns:
            return None
        self.issued += 1
        self.report.attempted += 1
        return next(self.requests)

    def complete(self, client: _Client, committed: bool, write_committed: bool,
                 latency: float) -> None:
        self.completed += 1
        self.last_done = self.now
        for stats in self._open_stats():
            if committed:
                stats.committed += 1
            else:
                stats.aborted += 1
            if write_committed:
                stats.write_committed += 1
            stats.latencies.append(latency)
        if self.completed == self.warmup_after:
            self.total = PhaseStats("total", self.now)
            self._total_route_base = self._route_snapshot()
        reps = [r.applied_tsid for r in self.tm.replicas.values() if r.alive]
        if reps:
            self._lag_sum += sum(self.tm.latest_tsid - w for w in reps) / len(reps)
            self._lag_n += 1
        cfg = self.config
        if self.completed % cfg.archive_period == 0:
            self.cluster.archive_step()
        if cfg.seed_period and self.completed % cfg.seed_period == 0:
            self.cluster.create_seed()
        while self.faults and self.faults[0].at <= self.completed:
            self._apply_fault(self.faults.pop(0))

    def _open_stats(self) -> list[PhaseStats]:
        out = [self.phase]
        if self.total is not None:
            out.append(self.total)
        return out

    def _route_snapshot(self) -> tuple:
        m = self.tm.metrics
        return (m["reads_primary"], m["reads_replica"], m["waits"])

    def _close(self, stats: PhaseStats, base: tuple) -> PhaseStats:
        stats.end = self.last_done if stats.end == 0.0 else stats.end
        now = self._route_snapshot()
        stats.reads_primary, stats.reads_replica, stats.waits = (a - b for a, b in zip(now, base))
        alive = [r.applied_tsid for r in self.tm.replicas.values() if r.alive]
        stats.min_watermark = min(alive) if alive else 0
        stats.max_tsid = self.tm.latest_tsid
        return stats

    def _new_phase(self, name: str) -> None:
        self.phase.end = self.now
        self.report.phases.append(self._close(self.phase, self._route_base))
        self._route_base = self._route_snapshot()
        self.phase = PhaseStats(name, self.now)

    # -- faults
    def _apply_fault(self, ev: FaultEvent) -> None:
        cl = self.cluster
        self._new_phase(ev.kind)
        if ev.kind == "fail-buffer":
            cl.fail_buffer()
        elif ev.kind == "recover-buffer":
            cl.recover_buffer()
            self.announce(force=True)
        elif ev.kind == "remove-replica":
            if not cl.replicas:
                return
            rid = ev.replica if ev.replica is not None else max(cl.replicas)
            cl.remove_replica(rid)
            self.nodes[rid].fail_all()
            self.wake()
        elif ev.kind == "add-replica":
            rid = ev.replica
            if rid is None and cl.departed:
                rid = max(cl.departed)
            rid = cl.add_replica(rid)
            self.nodes[rid] = Node(self, f"replica{rid}", self.params.replica_slots)
            self.deliver(rid, None)
        else:
            raise ValueError(f"unknown fault kind {ev.kind!r}")

    # -- routing and reads
    def count(self, decision: RoutingDecision, n: int) -> None:
        for _ in range(n):
            self.tm.count_route(decision)

    def route(self, rws: RWSet, decide: Callable[[], RoutingDecision], n: int):
        self._check_atomicity()
        decision = decide()
        self.count(decision, n)
        if decision.is_wait:
            return None
        if self.shadow is not None:
            self.report.granularity_checked += 1
            fine = self.tm.find_latest_consistent_tsid(rws)
            coarse = self.shadow.find_latest_consistent_tsid(degrade(rws.copy(), Granularity.TAS))
            if fine > coarse:
                self.report.granularity_violations += 1
        return decision

    def route_in_txn(self, rws: RWSet, running: RWSet) -> RoutingDecision:
        return self.tm.route_in_write_txn(rws, _Running(running), self.level, self.lb)

    def execute_reads(self, decision: RoutingDecision, stmts, rws: RWSet) -> float:
        """Run reads on the decided target now; returns service time."""
        tm = self.tm
        if decision.is_primary:
            results = self.primary_engine.run(stmts, snapshot_seq=tm.published_seq)
            return sum(r.cost for r in results) * self.params.unit_time
        rid = decision.replica_id
        state = tm.replicas[rid]
        engine = self.cluster.replicas[rid].engine
        results = engine.run(stmts)
        if self.params.check_gssi:
            self._check_read(stmts, results, rws, state.applied_tsid)
        state.active_reads += 1
        return sum(r.cost for r in results) * self.params.unit_time

    def send(self, decision: RoutingDecision, cost: float, finish, fail) -> None:
        hop = self.params.hop
        if decision.is_primary:
            node, state = self.primary, None
        else:
            node = self.nodes[decision.replica_id]
            state = self.tm.replicas.get(decision.replica_id)

        def release() -> None:
            if state is not None and state.active_reads > 0:
                state.active_reads -= 1

        def done() -> None:
            release()
            self.after(hop, finish)

        def failed() -> None:
            release()
            fail()

        self.after(hop, lambda: node.submit(Job(lambda: cost, done, failed)))

    def _check_read(self, stmts, results, rws: RWSet, applied: int) -> None:
        rep = self.report
        oracle = self.primary_engine.run(stmts, snapshot_seq=self.tm.published_seq)
        same = all(a.sorted_rows() == b.sorted_rows() for a, b in zip(results, oracle))
        if self.level is ConsistencyLevel.GSSI:
            rep.gssi_checked += 1
            required = self.tm.find_latest_consistent_tsid(rws)
            if not same or applied < required:
                rep.gssi_violations += 1
                raise InvariantViolation(
                    f"GSSI read mismatch: applied={applied} required={required} "
                    f"stmts={[str(s) for s in stmts]}", self.forensics())
        elif not same:
            rep.staleness += 1

    # -- write path hooks
    def acknowledge(self, txn_id: int) -> None:
        self.tm.acknowledge(txn_id)
        self.announce()

    def recorder_commit(self, wtxn) -> None:
        """No two concurrent committed writers share a key."""
        etxn = wtxn.engine_txn
        if not etxn.versioned:
            return
        keys = frozenset(etxn.write_buffer)
        start = bisect_right(self._commits, etxn.snapshot_seq, key=lambda c: c[0])
        for seq, _, other in self._commits[start:]:
            if seq < etxn.commit_seq and keys & other:
                self.report.write_overlap_violations += 1
                raise InvariantViolation(f"concurrent writers share {sorted(keys & other)[:3]}",
                                         self.forensics())
        self._commits.append((etxn.commit_seq, etxn.snapshot_seq, keys))

    def _shadow_update(self, ts: TState) -> None:
        coarse = replace(ts, rwset=degrade(ts.rwset.copy(), Granularity.TAS))
        self.shadow.update(coarse)

    def _check_atomicity(self) -> None:
        tm = self.tm
        published = max(self.cluster.buffer.high, max(tm.retained, default=0))
        if tm.indexes.latest != tm.latest_tsid or published != tm.latest_tsid:
            self.report.atomicity_violations += 1
            raise InvariantViolation(
                f"indexes at {tm.indexes.latest}, issued {tm.latest_tsid}, published {published}",
                self.forensics())

    def _check_no_loss(self) -> None:
        try:
            self.cluster.check_no_loss()
        except AssertionError as exc:
            raise InvariantViolation(str(exc), self.forensics()) from None

    # -- replication
    def announce(self, force: bool = False) -> None:
        high = self.cluster.buffer.high
        if high <= self.announced and not force:
            return
        self.announced = max(self.announced, high)
        for rid in sorted(self.cluster.replicas):
            self.after(self.params.prop_delay, lambda rid=rid, h=high: self.deliver(rid, h))

    def deliver(self, rid: int, upto: Optional[int]) -> None:
        cl = self.cluster
        if rid not in cl.replicas:
            return
        cl.deliver(rid, upto)
        ex = cl.replicas[rid].extractor
        if ex.last_fed > self.tm.indexes.latest:
            self.report.atomicity_violations += 1
            raise InvariantViolation(f"replica {rid} fetched TSID {ex.last_fed} ahead of indexes",
                                     self.forensics())
        self.start_replay(rid)
        self.wake()  # rollback no-ops advance the watermark without a replay job

    def start_replay(self, rid: int) -> None:
        rep = self.cluster.replicas.get(rid)
        if rep is None:
            return
        ex = rep.extractor
        node = self.nodes[rid]
        for ts in ex.startable():
            dur = max(ts.exec_time, 1.0) * self.params.unit_time
            node.submit(Job(lambda d=dur: d,
                            lambda ts=ts, ex=ex: self._replayed(rid, ex, ts.tsid),
                            lambda: None, "replay"))

    def _replayed(self, rid: int, ex, tsid: int) -> None:
        rep = self.cluster.replicas.get(rid)
        if rep is None or rep.extractor is not ex:
            return
        try:
            ex.complete(tsid)
        except ReplayFailure:
            self.cluster.fail_replica(rid)
            self.nodes[rid].fail_all()
            raise InvariantViolation(f"replica {rid} diverged at TSID {tsid}", self.forensics())
        self.start_replay(rid)
        self.wake()

    # -- parking (RSI-PC waits, 1SR acknowledgments)
    def park(self, ready: Callable[[], bool], resume: Callable[[], None]) -> None:
        if ready():
            resume()
            return
        self.waiters.append((ready, resume))

    def wake(self) -> None:
        if not self.waiters:
            return
        pending, self.waiters = self.waiters, []
        for ready, resume in pending:
            if ready():
                resume()
            else:
                self.waiters.append((ready, resume))

    # -- wrap-up
    def _finish(self) -> MetricsReport:
        rep = self.report
        self.phase.end = self.last_done
        rep.phases.append(self._close(self.phase, self._route_base))
        if self.total is None:
            self.total = PhaseStats("total", 0.0)
            self._total_route_base = (0, 0, 0)
        self.total.end = self.last_done
        rep.total = self._close(self.total, self._total_route_base)
        samples = [s for r in self.cluster.replicas.values() for s in r.extractor.dp_samples]
        rep.dp_mean = sum(samples) / len(samples) if samples else 0.0
        rep.dp_max = max(samples, default=0)
        rep.replica_lag_mean = self._lag_sum / self._lag_n if self._lag_n else 0.0
        rep.final_state_equal = self.cluster.states_equal()
        rep.reseeds = self.cluster.reseeds
        if self.waiters:
            raise InvariantViolation(f"{len(self.waiters)} requests never resumed", self.forensics())
        rep.check()
        return rep


class _Running:
    """Adapter giving route_in_write_txn the ``running`` attribute it reads."""

    def __init__(self, running: RWSet):
        self.running = running


def run_experiment(config: ClusterConfig, spec: WorkloadSpec,
                   level: ConsistencyLevel = ConsistencyLevel.GSSI,
                   granularity: Optional[Granularity] = None, lb: LBMode = LBMode.STMT,
                   faults: Iterable[FaultEvent] = (), **kwargs) -> MetricsReport:
    """Boot a cluster, drive the workload to completion and return its metrics."""
    if granularity is not None:
        config = replace(config, granularity=granularity)
    return Simulation(config, spec, level, lb, faults, **kwargs).run()


@dataclass
class ReplayComparison:
    parallel: MetricsReport
    serial: MetricsReport
    states_equal: bool


def compare_replay_modes(spec: WorkloadSpec, replicas: int = 2, **kwargs) -> ReplayComparison:
    """Run the same seed with parallel and serial extractors.

    Each run must converge to its Primary; additionally the write stream of the
    parallel run is replayed serially from the initial image and compared.
    """
    cfg = ClusterConfig(replicas=replicas)
    sim_p = Simulation(cfg, spec, label="parallel", **kwargs)
    par = sim_p.run()
    ser = Simulation(replace(cfg, serial_replay=True), spec, label="serial", **kwargs).run()
    oracle = serial_replay(Engine.snapshot_import(sim_p.initial_image), sim_p.tstate_log)
    replica_dumps = {r.engine.dump_state() for r in sim_p.cluster.replicas.values()}
    equal = bool(par.final_state_equal and ser.final_state_equal
                 and replica_dumps <= {oracle.dump_state()})
    if not equal:
        raise InvariantViolation("replay modes disagree on the final state")
    return ReplayComparison(par, ser, equal)
