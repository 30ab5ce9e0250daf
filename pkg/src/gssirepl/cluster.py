"""Node orchestration: Transactions Buffer, Archiver, Seed images, replica lifecycle, recovery."""

from __future__ import annotations

import logging
import os
import threading
from dataclasses import dataclass, field
from typing import Optional

from .engine import Engine
from .replay import Extractor, ReplayFailure
from .rwsets import Granularity, extract_all
from .sqlparse import SchemaCatalog, parse
from .txmanager import (BufferUnavailable, Completion, ConsistencyIndexes, TransactionManager,
                        TState, UnknownReplica)

log = logging.getLogger(__name__)

UNIT_SEP = "\x1f"


class RedirectToArchiver(Exception):
    """The requested TSID has already been moved out of the buffer."""

    def __init__(self, trimmed_upto: int):
        super().__init__(f"TSIDs <= {trimmed_upto} live in the archiver")
        self.trimmed_upto = trimmed_upto


class SeedRequired(Exception):
    pass


class NoLossViolation(AssertionError):
    pass


# ---------------------------------------------------------------------------
# transactions buffer

class TransactionsBuffer:
    """Ordered, contiguous TSID store with injectable failure."""

    def __init__(self, start: int = 0):
        self._items: dict[int, TState] = {}
        self._lock = threading.Lock()
        self.failed = False
        self.trimmed_upto = start
        self.high = start
        self.meta: dict[str, object] = {}

    def fail(self) -> None:
        self.failed = True

    def recover(self) -> None:
        self.failed = False

    def reset(self, start: int) -> None:
        with self._lock:
            self._items.clear()
            self.trimmed_upto = self.high = start

    def publish(self, ts: TState) -> None:
        with self._lock:
            if self.failed:
                raise BufferUnavailable("buffer down")
            if ts.tsid != self.high + 1:
                raise ValueError(f"publish out of order: {ts.tsid} after {self.high}")
            self._items[ts.tsid] = ts
            self.high = ts.tsid

    def put_meta(self, key: str, value) -> None:
        if self.failed:
            raise BufferUnavailable("buffer down")
        self.meta[key] = value

    def fetch_from(self, tsid: int, upto: Optional[int] = None) -> list[TState]:
        """TStates ``tsid, tsid+1, ...`` (optionally capped at *upto*)."""
        with self._lock:
            if self.failed:
                raise BufferUnavailable("buffer down")
            if tsid <= self.trimmed_upto:
                raise RedirectToArchiver(self.trimmed_upto)
            hi = self.high if upto is None else min(upto, self.high)
            return [self._items[k] for k in range(tsid, hi + 1)]

    def peek_upto(self, tsid: int) -> list[TState]:
        with self._lock:
            return [self._items[k] for k in range(self.trimmed_upto + 1, min(tsid, self.high) + 1)]

    def trim_upto(self, tsid: int) -> int:
        with self._lock:
            tsid = min(tsid, self.high)
            n = 0
            for k in range(self.trimmed_upto + 1, tsid + 1):
                del self._items[k]
                n += 1
            self.trimmed_upto = max(self.trimmed_upto, tsid)
            return n

    def tsids(self) -> set[int]:
        with self._lock:
            return set(self._items)

    def all(self) -> list[TState]:
        with self._lock:
            return [self._items[k] for k in sorted(self._items)]

    def __len__(self) -> int:
        return len(self._items)


# ---------------------------------------------------------------------------
# archiver

def serialize_tstate(ts: TState) -> str:
    stmts = ts.write_statements
    for s in stmts:
        if "\n" in s or UNIT_SEP in s:
            raise ValueError(f"TSID {ts.tsid}: statement text cannot be archived: {s!r}")
    return f"{ts.tsid}|{ts.completion.value}|{ts.exec_time!r}|{len(stmts)}|{UNIT_SEP.join(stmts)}"


def deserialize_tstate(line: str, catalog: SchemaCatalog,
                       granularity: Granularity = Granularity.ALL) -> TState:
    tsid, completion, units, count, body = line.rstrip("\n").split("|", 4)
    texts = body.split(UNIT_SEP) if int(count) else []
    if len(texts) != int(count):
        raise ValueError(f"TSID {tsid}: expected {count} statements, found {len(texts)}")
    stmts = [parse(t, catalog) for t in texts]
    per = float(units) / len(stmts) if stmts else 0.0
    ts = TState(-int(tsid), stmts, extract_all(stmts, catalog, granularity),
                Completion(completion), [per] * len(stmts))
    ts.assign_tsid(int(tsid))
    return ts


class ArchiverBuffer:
    """Append-only log of TStates applied everywhere, newer than the seed."""

    def __init__(self, catalog: SchemaCatalog, path: Optional[str] = None,
                 granularity: Granularity = Granularity.ALL):
        self.catalog = catalog
        self.path = path
        self.granularity = granularity
        self.seed_tsid = 0
        self._items: dict[int, TState] = {}
        if path and os.path.exists(path):
            self.load()

    def load(self) -> None:
        self._items.clear()
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    ts = deserialize_tstate(line, self.catalog, self.granularity)
                    self._items[ts.tsid] = ts

    def append(self, tstates: list[TState]) -> None:
        fresh = [t for t in tstates if t.tsid > self.seed_tsid and t.tsid not in self._items]
        if self.path and fresh:
            # write first: an I/O error leaves memory and the buffer untouched
            text = "".join(serialize_tstate(t) + "\n" for t in fresh)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(text)
        for t in fresh:
            self._items[t.tsid] = t

    def delete_upto(self, seed_tsid: int) -> int:
        self.seed_tsid = max(self.seed_tsid, seed_tsid)
        stale = [k for k in self._items if k <= self.seed_tsid]
        for k in stale:
            del self._items[k]
        if self.path and stale:
            tmp = self.path + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                for k in sorted(self._items):
                    fh.write(serialize_tstate(self._items[k]) + "\n")
            os.replace(tmp, self.path)
        return len(stale)

    def range(self, lo: int, hi: int) -> list[TState]:
        """TStates with lo <= TSID <= hi."""
        return [self._items[k] for k in sorted(self._items) if lo <= k <= hi]

    def tsids(self) -> set[int]:
        return set(self._items)

    def clear(self) -> None:
        self.delete_upto(max(self._items, default=self.seed_tsid))

    def __len__(self) -> int:
        return len(self._items)


# ---------------------------------------------------------------------------
# cluster

@dataclass(frozen=True)
class FaultEvent:
    """``kind`` is fail-buffer, recover-buffer, remove-replica or add-replica;
    ``at`` counts completed client transactions."""

    kind: str
    at: int
    replica: Optional[int] = None


@dataclass
class ClusterConfig:
    replicas: int = 2
    workers: int = 8
    archive_period: int = 200
    seed_period: int = 0  # 0: seeds only on request
    serial_replay: bool = False
    granularity: Granularity = Granularity.ALL
    prune_every: int = 1000
    archive_path: Optional[str] = None
    faults: list = field(default_factory=list)
    debug: bool = False

    def __post_init__(self):
        if self.replicas < 0:
            raise ValueError("replica count must be >= 0")
        if self.workers < 1 or self.archive_period < 1 or self.seed_period < 0:
            raise ValueError("worker count and periods must be positive")


@dataclass
class Seed:
    image: str
    tsid: int
    indexes: ConsistencyIndexes


@dataclass
class Replica:
    rid: int
    engine: Engine
    extractor: Extractor
    alive: bool = True


class Cluster:
    """Primary, TM, buffer, archiver and replicas wired together.

    Replication runs when :meth:`pump` is called (or through the simulator,
    which uses :meth:`deliver` and the extractors directly).
    """

    def __init__(self, primary: Engine, config: Optional[ClusterConfig] = None, *,
                 clock=None, rng=None):
        self.config = config or ClusterConfig()
        cfg = self.config
        self.primary = primary
        self.buffer = TransactionsBuffer()
        self.archiver = ArchiverBuffer(primary.catalog, cfg.archive_path, cfg.granularity)
        self.tm = TransactionManager(primary, self.buffer, granularity=cfg.granularity,
                                     prune_every=cfg.prune_every, clock=clock, rng=rng,
                                     debug=cfg.debug)
        self.tm.wait_hook = lambda _pred: self.pump()
        self.tm.tsid_seq[0] = primary.latest_seq
        self.replicas: dict[int, Replica] = {}
        self.departed: dict[int, Replica] = {}
        self._next_rid = 1
        self.seed: Optional[Seed] = None
        self.reseeds = 0
        self.create_seed()
        for _ in range(cfg.replicas):
            self.add_replica()

    # -- seeds and archiving
    def create_seed(self) -> Seed:
        tm = self.tm
        with tm._lock:
            tsid = tm.latest_tsid
            seq = tm.tsid_seq.get(tsid, tm.published_seq)
            indexes = tm.indexes.copy()
        image = self.primary.snapshot_export(seq)
        self.seed = Seed(image, tsid, indexes)
        self.archiver.delete_upto(tsid)
        return self.seed

    def min_alive_watermark(self) -> int:
        alive = [r.extractor.applied_tsid for r in self.replicas.values() if r.alive]
        return min(alive) if alive else 0

    def archive_step(self) -> int:
        """Move TStates applied on every alive replica to the archiver."""
        floor = self.min_alive_watermark()
        try:
            moving = self.buffer.peek_upto(floor)
            self.archiver.append(moving)
        except (BufferUnavailable, OSError) as exc:
            log.warning("archive step skipped: %s", exc)
            return 0
        self.buffer.trim_upto(floor)
        if self.seed is not None:
            self.archiver.delete_upto(self.seed.tsid)
        return len(moving)

    def tstates_from(self, tsid: int, upto: Optional[int] = None) -> list[TState]:
        """TStates >= *tsid* from archiver then buffer; raises BufferUnavailable while down."""
        out = []
        if tsid <= self.buffer.trimmed_upto:
            if self.seed is not None and tsid <= self.seed.tsid:
                raise SeedRequired(f"TSID {tsid} is only in the seed image")
            hi = self.buffer.trimmed_upto if upto is None else min(upto, self.buffer.trimmed_upto)
            out = self.archiver.range(tsid, hi)
            if len(out) != hi - tsid + 1:
                raise SeedRequired(f"archiver is missing TSIDs in [{tsid}, {hi}]")
            tsid = self.buffer.trimmed_upto + 1
        if upto is None or tsid <= upto:
            out.extend(self.buffer.fetch_from(tsid, upto))
        return out

    # -- replicas
    def _wire(self, rid: int, engine: Engine, start: int, preapplied=frozenset()) -> Replica:
        tm = self.tm
        ex = Extractor(engine, replica_id=rid, workers=self.config.workers,
                       serial=self.config.serial_replay, start_tsid=start,
                       debug=self.config.debug,
                       on_watermark=lambda w, rid=rid: tm.report_watermark(rid, w))
        for t in preapplied:
            ex.scheduler.tracker._above.add(t)
        rep = Replica(rid, engine, ex)
        self.replicas[rid] = rep
        tm.register_replica(rid, engine, start)
        return rep

    def add_replica(self, rid: Optional[int] = None) -> int:
        """Start a replica from the seed, or resume a removed one where it stopped."""
        if rid is not None and rid in self.replicas:
            raise ValueError(f"replica {rid} already active")
        old = self.departed.pop(rid, None) if rid is not None else None
        if old is not None and old.extractor.applied_tsid >= self.seed.tsid:
            ex = old.extractor
            rep = self._wire(old.rid, old.engine, ex.applied_tsid, ex.scheduler.tracker.applied_above)
            return rep.rid
        if self.seed is None:
            raise SeedRequired("no seed image")
        if rid is None:
            rid = self._next_rid
        self._next_rid = max(self._next_rid, rid + 1)
        engine = Engine.snapshot_import(self.seed.image, debug=self.config.debug)
        self._wire(rid, engine, self.seed.tsid)
        return rid

    def _detach(self, rid: int) -> Replica:
        rep = self.replicas.pop(rid, None)
        if rep is None:
            raise UnknownReplica(rid)
        rep.alive = False
        self.tm.unregister_replica(rid)
        return rep

    def remove_replica(self, rid: int) -> None:
        """Graceful removal; the replica's position is kept for re-adding."""
        # in-flight replays are abandoned; re-adding resumes from the watermark
        self.departed[rid] = self._detach(rid)

    def fail_replica(self, rid: int) -> None:
        """Crash: the replica's state is discarded; re-adding starts from the seed."""
        self._detach(rid)

    # -- replication driving
    def deliver(self, rid: int, upto: Optional[int] = None) -> int:
        """Feed replica *rid* every TState it has not seen (up to *upto*)."""
        rep = self.replicas[rid]
        ex = rep.extractor
        try:
            batch = self.tstates_from(ex.last_fed + 1, upto)
        except BufferUnavailable:
            return 0
        except SeedRequired:
            self.fail_replica(rid)
            self.add_replica(rid)
            return self.deliver(rid, upto)
        tracker = ex.scheduler.tracker
        for ts in batch:
            if tracker.is_applied(ts.tsid):
                ex.scheduler.last_seen = ts.tsid
                continue
            ex.feed(ts)
        return len(batch)

    def pump(self, rounds: int = 1) -> None:
        """Deliver and apply everything available on every alive replica."""
        for _ in range(rounds):
            for rid in sorted(self.replicas):
                rep = self.replicas.get(rid)
                if rep is None:
                    continue
                self.deliver(rid)
                try:
                    rep.extractor.drain()
                except ReplayFailure:
                    log.error("replica %d failed during replay", rid)
                    self.fail_replica(rid)

    def quiesce(self) -> None:
        self.tm.flush_retained()
        self.pump()

    # -- failures of the propagation path and the TM
    def fail_buffer(self) -> None:
        self.buffer.fail()

    def recover_buffer(self) -> int:
        self.buffer.recover()
        return self.tm.flush_retained()

    def crash_tm(self) -> None:
        """Drop all volatile TM state (indexes, pending completions, retained TStates)."""
        tm = self.tm
        with tm._lock:
            tm.indexes = ConsistencyIndexes(tm.catalog)
            tm.latest_tsid = 0
            tm._pending.clear()
            tm.retained.clear()
            tm.completed.clear()
            tm.tsid_seq.clear()

    def recover_tm(self) -> bool:
        """Rebuild TM state from the seed, archiver and buffer.

        Returns True when the logs were complete; otherwise a fresh seed is cut
        and every replica is refreshed from it.
        """
        tm = self.tm
        seed = self.seed
        logs = {t.tsid: t for t in self.archiver.range(seed.tsid + 1, 1 << 62)}
        logs.update({t.tsid: t for t in self.buffer.all() if t.tsid > seed.tsid})
        tsids = sorted(logs)
        contiguous = tsids == list(range(seed.tsid + 1, seed.tsid + 1 + len(tsids)))
        seqs = [logs[k].commit_seq for k in tsids if logs[k].commit_seq is not None]
        image_seq = int(seed.image.split("\n", 1)[0].rsplit(" ", 1)[1])
        last_seq = max(seqs, default=image_seq)
        complete = contiguous and last_seq == self.primary.latest_seq
        with tm._lock:
            if complete:
                idx = seed.indexes.copy()
                for k in tsids:
                    idx.update(logs[k])
                idx.prune(max(self.buffer.meta.get("pruned_upto", 0), idx.pruned_upto))
                tm.indexes = idx
                tm.latest_tsid = tsids[-1] if tsids else seed.tsid
                tm.published_seq = self.primary.latest_seq
                tm.tsid_seq[tm.latest_tsid] = tm.published_seq
                return True
            synthetic = max(tsids[-1] if tsids else 0, seed.tsid, self.buffer.high) + 1
            tm.indexes = ConsistencyIndexes(tm.catalog)
            tm.indexes.latest = synthetic
            tm.latest_tsid = synthetic
            tm.published_seq = self.primary.latest_seq
            tm.tsid_seq[synthetic] = tm.published_seq
        self.reseeds += 1
        self.buffer.reset(synthetic)
        self.archiver.clear()
        self.create_seed()
        for rid in sorted(self.replicas):
            self.fail_replica(rid)
            self.add_replica(rid)
        self.departed.clear()
        return False

    # -- checks and estimates
    def check_no_loss(self) -> None:
        """Every issued TSID is held by exactly one of retained/buffer/archiver, or by the seed.

        All four holders are contiguous ranges, so the check is interval arithmetic.
        """
        latest = self.tm.latest_tsid
        spans = {"retained": _span(self.tm.retained), "archiver": _span(self.archiver._items)}
        spans["buffer"] = (self.buffer.trimmed_upto + 1, self.buffer.high) \
            if self.buffer.high > self.buffer.trimmed_upto else None
        for name, span in spans.items():
            if span == "gap":
                raise NoLossViolation(f"{name} holds a non-contiguous TSID range")
        held = sorted((s for s in spans.items() if s[1] is not None), key=lambda kv: kv[1])
        for (n1, a), (n2, b) in zip(held, held[1:]):
            if b[0] <= a[1]:
                raise NoLossViolation(f"{n1}/{n2} overlap at TSID {b[0]}")
        arch = spans["archiver"]
        if arch is not None and arch[0] <= self.seed.tsid:
            raise NoLossViolation(f"archiver/seed overlap at TSID {arch[0]}")
        covered = self.seed.tsid
        for _, (lo, hi) in held:
            if lo > covered + 1:
                break
            covered = max(covered, hi)
        if covered < latest:
            raise NoLossViolation(f"TSIDs lost: {covered + 1}..{latest}")

    def estimate_sync_time(self, bandwidth: float = float("inf"), dp: Optional[float] = None) -> float:
        """Seed transfer time plus replay time of everything newer than the seed."""
        image_bytes = len(self.seed.image.encode())
        transfer = estimate_sync_time(image_bytes, [], 1.0, bandwidth)
        if dp is None:
            samples = [r.extractor.mean_dp for r in self.replicas.values() if r.extractor.dp_samples]
            dp = max(1.0, sum(samples) / len(samples)) if samples else 1.0
        pending = self.archiver.range(self.seed.tsid + 1, 1 << 62)
        pending += [t for t in self.buffer.all() if t.tsid > self.seed.tsid]
        pending += list(self.tm.retained.values())
        return transfer + sum(t.exec_time for t in pending) / dp

    def states_equal(self) -> bool:
        ref = self.primary.dump_state(self.tm.published_seq)
        return all(r.engine.dump_state() == ref for r in self.replicas.values())


def _span(keys):
    if not keys:
        return None
    lo, hi = min(keys), max(keys)
    return (lo, hi) if hi - lo + 1 == len(keys) else "gap"


def estimate_sync_time(image_bytes: int, exec_times: list[float], dp: float,
                       bandwidth: float = float("inf")) -> float:
    transfer = 0.0 if bandwidth == float("inf") or image_bytes == 0 else image_bytes / bandwidth
    return transfer + sum(exec_times) / max(dp, 1.0)
