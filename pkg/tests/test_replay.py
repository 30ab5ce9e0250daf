import random

import pytest
from hypothesis import given, settings, strategies as st

from gssirepl import golden
from gssirepl.engine import Engine
from gssirepl.harness.checks import expected_watermarks, random_batch
from gssirepl.replay import (Extractor, OutOfOrderDelivery, ParallelScheduler, ReplayFailure,
                             UnknownTransaction, WatermarkTracker,
                             parallel_replay, serial_replay, threaded_replay)
from gssirepl.rwsets import RWSet
from gssirepl.sqlparse import parse
from gssirepl.txmanager import Completion, TState


def tstate(tsid, completion=Completion.COMMIT, rws=None):
    ts = TState(tsid, [], rws or RWSet(), completion)
    ts.assign_tsid(tsid)
    return ts


def test_watermark_examples():
    w = WatermarkTracker()
    assert [w.add(t) for t in (2, 3, 1, 5, 4)] == [0, 0, 3, 3, 5]
    assert w.applied_above == frozenset()
    with pytest.raises(ValueError):
        w.add(4)


@given(st.permutations(list(range(1, 25))))
def test_watermark_is_max_gap_free_prefix(order):
    w = WatermarkTracker()
    got = [w.add(t) for t in order]
    assert got == expected_watermarks(order)
    assert got == sorted(got)


def test_worked_example_schedule():
    ts = golden.write_tstates()
    s = ParallelScheduler(start_tsid=10, debug=True)
    out = [t.tsid for name in ("W1", "W2", "W3", "W4", "W5") for t in s.on_new_transaction(ts[name])]
    assert out == [11, 12, 15]
    assert [t.tsid for t in s.wait_queue] == [13, 14]
    assert [t.tsid for t in s.on_transaction_complete(12)] == []
    assert s.watermark == 10
    assert [t.tsid for t in s.on_transaction_complete(11)] == [13]
    assert s.watermark == 12
    assert [t.tsid for t in s.on_transaction_complete(13)] == [14]
    s.on_transaction_complete(15)
    s.on_transaction_complete(14)
    assert s.watermark == 15 and s.is_idle()


def test_conflict_with_waiting_transaction_queues():
    ts = golden.write_tstates()
    s = ParallelScheduler(start_tsid=10)
    for name in ("W1", "W3", "W4"):
        s.on_new_transaction(ts[name])
    # W4 is independent of the running W1 but conflicts with the waiting W3
    assert list(s.running) == [11]
    assert [t.tsid for t in s.wait_queue] == [13, 14]


def test_serial_mode_runs_one_at_a_time():
    ts = golden.write_tstates()
    s = ParallelScheduler(start_tsid=10, serial=True)
    for name in ("W1", "W2", "W5"):
        s.on_new_transaction(ts[name])
    assert list(s.running) == [11]
    assert [t.tsid for t in s.on_transaction_complete(11)] == [12]


def test_rollbacks_only_advance_the_watermark():
    s = ParallelScheduler()
    s.on_new_transaction(tstate(1))
    assert s.on_new_transaction(tstate(2, Completion.ROLLBACK)) == []
    assert s.watermark == 0
    s.on_transaction_complete(1)
    assert s.watermark == 2
    assert [e.kind for e in s.trace] == ["dispatch", "noop", "complete"]


def test_delivery_order_and_unknown_completion():
    s = ParallelScheduler()
    s.on_new_transaction(tstate(3))
    with pytest.raises(OutOfOrderDelivery):
        s.on_new_transaction(tstate(2))
    with pytest.raises(UnknownTransaction):
        s.on_transaction_complete(9)


def test_watermark_callback_only_on_change():
    seen = []
    s = ParallelScheduler(on_watermark=seen.append)
    for t in (1, 2, 3):
        s.on_new_transaction(tstate(t))
    for t in (3, 2, 1):
        s.on_transaction_complete(t)
    assert seen == [3]


def test_extractor_respects_worker_limit():
    image, tstates, _ = random_batch(random.Random(4), max_txns=80)
    ex = Extractor(Engine.snapshot_import(image), workers=2)
    rng = random.Random(1)
    for ts in tstates:
        ex.feed(ts)
        ex.startable()
        assert len(ex.executing) <= 2
        if ex.executing and rng.random() < 0.5:
            ex.complete(rng.choice(list(ex.executing)))
    ex.drain(rng)
    assert ex.applied_tsid == len(tstates) and max(ex.dp_samples) <= 2


def test_failed_replay_marks_extractor_dead():
    eng = golden.seeded_engine()
    bad = TState(1, [parse("INSERT INTO R VALUES (100, 0, 0, 0)", eng.catalog)], RWSet(),
                 Completion.COMMIT)
    bad.assign_tsid(1)
    ex = Extractor(eng)
    ex.feed(bad)
    ex.startable()
    with pytest.raises(ReplayFailure):
        ex.complete(1)
    assert ex.dead


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from([1, 2, 3, 8]))
def test_parallel_replay_equals_serial(seed, workers):
    rng = random.Random(seed)
    image, tstates, primary_state = random_batch(rng, max_txns=60)
    serial = serial_replay(Engine.snapshot_import(image), tstates).dump_state()
    par = parallel_replay(Engine.snapshot_import(image), tstates, rng=random.Random(seed + 1),
                          workers=workers, debug=True)
    assert serial == primary_state
    assert par.engine.dump_state() == serial
    assert par.applied_tsid == len(tstates)


def test_threaded_replay_equals_serial():
    image, tstates, primary_state = random_batch(random.Random(77), max_txns=200)
    ex = threaded_replay(Engine.snapshot_import(image), tstates, workers=4)
    assert ex.engine.dump_state() == primary_state
    assert ex.applied_tsid == len(tstates)
