"""Per-replica Extractor: conflict-aware parallel replay of TStates."""

from __future__ import annotations

import logging
import random
from collections import deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

from .engine import Engine, EngineError
from .rwsets import RWSet, are_independent, dump, merge_into, remove_from

log = logging.getLogger(__name__)


class OutOfOrderDelivery(Exception):
    pass


class UnknownTransaction(KeyError):
    pass


class SafetyViolation(AssertionError):
    pass


class ReplayFailure(Exception):
    """Executing a TState failed; the replica can no longer be trusted."""


class WatermarkTracker:
    """Highest TSID below which every TSID has been applied."""

    def __init__(self, start: int = 0):
        self.watermark = start
        self._above: set[int] = set()

    def add(self, tsid: int) -> int:
        if tsid <= self.watermark or tsid in self._above:
            raise ValueError(f"TSID {tsid} applied twice")
        self._above.add(tsid)
        while self.watermark + 1 in self._above:
            self.watermark += 1
            self._above.discard(self.watermark)
        return self.watermark

    @property
    def applied_above(self) -> frozenset:
        return frozenset(self._above)

    def is_applied(self, tsid: int) -> bool:
        return tsid <= self.watermark or tsid in self._above


@dataclass
class ScheduleEvent:
    kind: str  # dispatch | enqueue | complete | noop
    tsid: int


class ParallelScheduler:
    """Running/waiting state bookkeeping with a FIFO wait queue.

    Calls return the TStates dispatched as a consequence; the caller executes
    them and reports back through :meth:`on_transaction_complete`.  With
    ``serial=True`` a transaction only starts when nothing else is running.
    """

    def __init__(self, *, start_tsid: int = 0, serial: bool = False, debug: bool = False,
                 on_watermark: Optional[Callable[[int], None]] = None):
        self.running_state = RWSet()
        self.waiting_state = RWSet()
        self.wait_queue: deque = deque()
        self.running: dict[int, object] = {}
        self.tracker = WatermarkTracker(start_tsid)
        self.last_seen = start_tsid
        self.serial = serial
        self.debug = debug
        self.on_watermark = on_watermark
        self.trace: list[ScheduleEvent] = []
        self.max_running = 0

    @property
    def watermark(self) -> int:
        return self.tracker.watermark

    @property
    def applied(self) -> set[int]:
        return set(range(1, self.tracker.watermark + 1)) | set(self.tracker.applied_above)

    def _independent(self, ts) -> bool:
        if self.serial:
            return not self.running and not self.wait_queue
        return are_independent(self.running_state, ts.rwset) and \
            are_independent(self.waiting_state, ts.rwset)

    def _dispatch(self, ts) -> None:
        if self.debug:
            for other in self.running.values():
                if not are_independent(other.rwset, ts.rwset):
                    raise SafetyViolation(f"TSID {ts.tsid} conflicts with running {other.tsid}")
        merge_into(self.running_state, ts.rwset)
        self.running[ts.tsid] = ts
        self.max_running = max(self.max_running, len(self.running))
        self.trace.append(ScheduleEvent("dispatch", ts.tsid))

    def _mark_applied(self, tsid: int) -> None:
        before = self.tracker.watermark
        after = self.tracker.add(tsid)
        if after != before and self.on_watermark is not None:
            self.on_watermark(after)

    def on_new_transaction(self, ts) -> list:
        if ts.tsid is None or ts.tsid <= self.last_seen:
            raise OutOfOrderDelivery(f"TSID {ts.tsid} after {self.last_seen}")
        self.last_seen = ts.tsid
        if ts.is_rollback:
            self.trace.append(ScheduleEvent("noop", ts.tsid))
            self._mark_applied(ts.tsid)
            return []
        if self._independent(ts):
            self._dispatch(ts)
            out = [ts]
        else:
            merge_into(self.waiting_state, ts.rwset)
            self.wait_queue.append(ts)
            self.trace.append(ScheduleEvent("enqueue", ts.tsid))
            out = []
        self._check()
        return out

    def on_transaction_complete(self, tsid: int) -> list:
        ts = self.running.pop(tsid, None)
        if ts is None:
            raise UnknownTransaction(tsid)
        remove_from(self.running_state, ts.rwset)
        self.trace.append(ScheduleEvent("complete", tsid))
        out = []
        while self.wait_queue:
            head = self.wait_queue[0]
            ok = not self.running if self.serial else are_independent(self.running_state, head.rwset)
            if not ok:
                break
            self.wait_queue.popleft()
            remove_from(self.waiting_state, head.rwset)
            self._dispatch(head)
            out.append(head)
        self._mark_applied(tsid)
        self._check()
        return out

    def is_idle(self) -> bool:
        return not self.running and not self.wait_queue

    def _check(self) -> None:
        if not self.debug:
            return
        expect = RWSet()
        for ts in self.running.values():
            merge_into(expect, ts.rwset)
        if dump(expect) != dump(self.running_state):
            raise SafetyViolation("running_state drifted from running transactions")
        tsids = [t.tsid for t in self.wait_queue]
        if tsids != sorted(set(tsids)):
            raise SafetyViolation("wait queue out of TSID order")


def apply_tstate(engine: Engine, ts) -> None:
    if ts.is_rollback or not ts.statements:
        return
    try:
        engine.apply_atomically(ts.statements)
    except EngineError as exc:
        raise ReplayFailure(f"TSID {ts.tsid}: {exc}") from exc


def serial_replay(engine: Engine, tstates: Iterable) -> Engine:
    """Apply TStates one at a time in TSID order (the correctness oracle)."""
    last = None
    for ts in tstates:
        if last is not None and ts.tsid <= last:
            raise OutOfOrderDelivery(f"TSID {ts.tsid} after {last}")
        last = ts.tsid
        apply_tstate(engine, ts)
    return engine


class Extractor:
    """Feeds a scheduler and applies dispatched TStates to one replica engine.

    Execution is split into :meth:`startable` (pick what may begin now, at most
    ``workers`` at a time) and :meth:`complete` (apply it and release
    dependents), so a simulator can put time between the two.
    """

    def __init__(self, engine: Engine, *, replica_id: int = 0, workers: int = 8,
                 serial: bool = False, start_tsid: int = 0, debug: bool = False,
                 on_watermark: Optional[Callable[[int], None]] = None):
        if workers < 1:
            raise ValueError("workers must be positive")
        self.engine = engine
        self.replica_id = replica_id
        self.workers = workers
        self.scheduler = ParallelScheduler(start_tsid=start_tsid, serial=serial, debug=debug,
                                           on_watermark=on_watermark)
        self.ready: deque = deque()
        self.executing: dict[int, object] = {}
        self.dead = False
        self.dp_samples: list[int] = []

    @property
    def applied_tsid(self) -> int:
        return self.scheduler.watermark

    @property
    def last_fed(self) -> int:
        return self.scheduler.last_seen

    def feed(self, ts) -> None:
        if self.dead:
            return
        self.ready.extend(self.scheduler.on_new_transaction(ts))

    def startable(self) -> list:
        out = []
        while self.ready and len(self.executing) < self.workers:
            ts = self.ready.popleft()
            self.executing[ts.tsid] = ts
            out.append(ts)
        if out:
            self.dp_samples.append(len(self.executing))
        return out

    def complete(self, tsid: int) -> None:
        ts = self.executing.pop(tsid, None)
        if ts is None:
            raise UnknownTransaction(tsid)
        try:
            apply_tstate(self.engine, ts)
        except ReplayFailure:
            self.dead = True
            raise
        self.ready.extend(self.scheduler.on_transaction_complete(tsid))

    def is_idle(self) -> bool:
        return not self.ready and not self.executing and self.scheduler.is_idle()

    def drain(self, rng: Optional[random.Random] = None) -> None:
        """Run everything runnable to quiescence, completing in FIFO or random order."""
        while True:
            self.startable()
            if not self.executing:
                return
            keys = list(self.executing)
            tsid = rng.choice(keys) if rng is not None else keys[0]
            self.complete(tsid)

    @property
    def mean_dp(self) -> float:
        return sum(self.dp_samples) / len(self.dp_samples) if self.dp_samples else 0.0


def parallel_replay(engine: Engine, tstates: Iterable, *, rng: Optional[random.Random] = None,
                    workers: int = 8, debug: bool = False, start_tsid: int = 0) -> Extractor:
    """Replay through the scheduler with randomized feed/complete interleavings."""
    rng = rng or random.Random(0)
    ex = Extractor(engine, workers=workers, debug=debug, start_tsid=start_tsid)
    pending = deque(tstates)
    while pending or not ex.is_idle():
        ex.startable()
        if pending and (not ex.executing or rng.random() < 0.5):
            ex.feed(pending.popleft())
            continue
        if ex.executing:
            ex.complete(rng.choice(list(ex.executing)))
    return ex


def threaded_replay(engine: Engine, tstates: Iterable, *, workers: int = 8) -> Extractor:
    """Replay on a real thread pool; completions are handled on the calling thread."""
    ex = Extractor(engine, workers=workers)
    for ts in tstates:
        ex.feed(ts)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = {}
        while True:
            for ts in ex.startable():
                futures[pool.submit(apply_tstate, engine, ts)] = ts.tsid
            if not futures:
                break
            done, _ = wait(futures, return_when=FIRST_COMPLETED)
            for fut in done:
                tsid = futures.pop(fut)
                fut.result()
                ts = ex.executing.pop(tsid)
                ex.ready.extend(ex.scheduler.on_transaction_complete(ts.tsid))
    return ex
