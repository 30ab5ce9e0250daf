import random

import pytest

from gssirepl import golden
from gssirepl.cluster import (ArchiverBuffer, Cluster, ClusterConfig, NoLossViolation,
                              RedirectToArchiver, SeedRequired, TransactionsBuffer,
                              deserialize_tstate, estimate_sync_time, serialize_tstate)
from gssirepl.rwsets import dump, extract_all
from gssirepl.txmanager import BufferUnavailable, Completion, TState


def tstates(n, start=1):
    cat = golden.catalog()
    stmts = list(golden.write_statements(cat).values())
    out = []
    for i in range(start, start + n):
        s = [stmts[i % len(stmts)]]
        ts = TState(i, s, extract_all(s, cat), Completion.COMMIT, [2.0])
        ts.assign_tsid(i)
        out.append(ts)
    return out


def test_buffer_publish_is_contiguous():
    b = TransactionsBuffer()
    a, c = tstates(2)
    b.publish(a)
    with pytest.raises(ValueError):
        b.publish(tstates(1, start=5)[0])
    b.publish(c)
    assert [t.tsid for t in b.fetch_from(1)] == [1, 2]
    assert [t.tsid for t in b.fetch_from(2, upto=9)] == [2]
    assert b.fetch_from(3) == []


def test_buffer_trim_redirects_and_failure():
    b = TransactionsBuffer()
    for t in tstates(5):
        b.publish(t)
    assert b.trim_upto(3) == 3 and b.trimmed_upto == 3
    with pytest.raises(RedirectToArchiver) as info:
        b.fetch_from(2)
    assert info.value.trimmed_upto == 3
    b.fail()
    with pytest.raises(BufferUnavailable):
        b.fetch_from(4)
    with pytest.raises(BufferUnavailable):
        b.publish(tstates(1, start=6)[0])
    b.recover()
    assert [t.tsid for t in b.fetch_from(4)] == [4, 5]


def test_tstate_line_roundtrip():
    cat = golden.catalog()
    for ts in tstates(5):
        line = serialize_tstate(ts)
        assert line.split("|")[:4] == [str(ts.tsid), "commit", "2.0", "1"]
        back = deserialize_tstate(line, cat)
        assert back.tsid == ts.tsid and back.write_statements == ts.write_statements
        assert dump(back.rwset) == dump(ts.rwset) and back.exec_time == ts.exec_time


def test_rollback_line_has_no_statements():
    ts = TState(1, [], extract_all([], golden.catalog()), Completion.ROLLBACK)
    ts.assign_tsid(7)
    back = deserialize_tstate(serialize_tstate(ts), golden.catalog())
    assert back.is_rollback and back.statements == [] and back.tsid == 7


def test_archiver_file_persistence(tmp_path):
    path = str(tmp_path / "archive.log")
    cat = golden.catalog()
    arc = ArchiverBuffer(cat, path)
    arc.append(tstates(6))
    arc.append(tstates(2))  # already held: ignored
    assert ArchiverBuffer(cat, path).tsids() == set(range(1, 7))
    assert arc.delete_upto(4) == 4
    reloaded = ArchiverBuffer(cat, path)
    assert reloaded.tsids() == {5, 6}
    assert [t.tsid for t in reloaded.range(5, 5)] == [5]
    arc.append(tstates(1, start=3))  # at or below the seed: ignored
    assert arc.tsids() == {5, 6}


def test_estimate_sync_time_arithmetic():
    assert estimate_sync_time(1000, [2.0, 4.0, 6.0], 3.0, bandwidth=100.0) == 10.0 + 4.0
    assert estimate_sync_time(0, [2.0], 0.5) == 2.0  # dp below one counts as serial
    assert estimate_sync_time(10**6, [], 4.0) == 0.0


@pytest.fixture
def cl():
    return Cluster(golden.seeded_engine(replay_safe=True), ClusterConfig(replicas=2, prune_every=5),
                   clock=lambda: 0, rng=random.Random(0))


def drive(cl, n, rng=None):
    rng = rng or random.Random(0)
    s = cl.tm.open_session()
    for _ in range(n):
        _, sql, params = golden.WRITES[rng.randrange(len(golden.WRITES))]
        s.submit(sql, params)


def test_pump_converges_and_archives(cl):
    drive(cl, 12)
    cl.pump()
    assert cl.states_equal() and cl.min_alive_watermark() == 12
    assert cl.archive_step() == 12
    assert cl.archiver.tsids() == set(range(1, 13)) and len(cl.buffer) == 0
    cl.check_no_loss()
    cl.create_seed()
    assert len(cl.archiver) == 0 and cl.seed.tsid == 12
    cl.check_no_loss()


def test_archive_step_only_moves_what_every_replica_applied(cl):
    drive(cl, 6)
    cl.deliver(1)
    cl.replicas[1].extractor.drain()
    assert cl.archive_step() == 0
    cl.pump()
    assert cl.archive_step() == 6


def test_no_loss_detects_gaps_and_double_holding(cl):
    drive(cl, 6)
    cl.pump()
    cl.archive_step()
    cl.archiver._items.pop(3)
    with pytest.raises(NoLossViolation):
        cl.check_no_loss()
    cl.archiver.append(tstates(1, start=3))
    cl.check_no_loss()
    cl.archiver._items[7] = tstates(1, start=7)[0]
    drive(cl, 1)
    with pytest.raises(NoLossViolation):
        cl.check_no_loss()


def test_buffer_outage_is_invisible_to_writers(cl):
    cl.fail_buffer()
    drive(cl, 5)
    assert len(cl.tm.retained) == 5
    cl.check_no_loss()
    cl.pump()
    assert cl.min_alive_watermark() == 0
    assert cl.recover_buffer() == 5
    cl.pump()
    assert cl.states_equal()
    cl.check_no_loss()


def test_new_replica_starts_from_seed_and_catches_up(cl):
    drive(cl, 8)
    cl.pump()
    cl.archive_step()
    cl.create_seed()
    drive(cl, 4, random.Random(5))
    rid = cl.add_replica()
    assert cl.replicas[rid].extractor.applied_tsid == 8
    cl.pump()
    assert cl.states_equal() and cl.tm.replicas[rid].applied_tsid == 12


def test_removed_replica_resumes_from_its_watermark(cl):
    drive(cl, 4)
    cl.pump()
    cl.remove_replica(2)
    drive(cl, 6, random.Random(2))
    cl.pump()
    cl.archive_step()
    assert 2 not in cl.tm.replicas and cl.archiver.tsids() == set(range(1, 11))
    assert cl.add_replica(2) == 2
    assert cl.replicas[2].extractor.applied_tsid == 4
    cl.pump()
    assert cl.states_equal() and cl.reseeds == 0


def test_replica_behind_seed_is_reseeded(cl):
    drive(cl, 4)
    cl.remove_replica(2)
    cl.pump()
    cl.archive_step()
    cl.create_seed()
    cl.add_replica(2)
    assert cl.replicas[2].extractor.applied_tsid == 4
    cl.pump()
    assert cl.states_equal()


def test_tstates_from_requires_seed_for_old_tsids(cl):
    drive(cl, 4)
    cl.pump()
    cl.archive_step()
    cl.create_seed()
    with pytest.raises(SeedRequired):
        cl.tstates_from(2)


def test_recover_tm_rebuilds_identical_indexes(cl):
    drive(cl, 20)
    cl.pump()
    cl.archive_step()
    cl.create_seed()
    drive(cl, 9, random.Random(9))
    cl.pump()
    cl.archive_step()
    drive(cl, 4, random.Random(4))
    before, latest = cl.tm.indexes.dump(), cl.tm.latest_tsid
    cl.crash_tm()
    assert cl.recover_tm()
    assert cl.tm.indexes.dump() == before and cl.tm.latest_tsid == latest
    drive(cl, 3)
    cl.pump()
    assert cl.states_equal()
    cl.check_no_loss()


def test_recover_tm_with_lost_logs_reseeds(cl):
    drive(cl, 6)
    cl.fail_buffer()
    drive(cl, 3, random.Random(3))
    cl.crash_tm()  # the retained TStates die with the TM
    assert not cl.recover_tm()
    assert cl.reseeds == 1 and cl.seed.tsid == cl.tm.latest_tsid
    cl.recover_buffer()
    cl.pump()
    assert cl.states_equal()
    drive(cl, 4)
    cl.pump()
    assert cl.states_equal()
    cl.check_no_loss()


def test_failed_replica_restarts_from_seed(cl):
    drive(cl, 5)
    cl.pump()
    cl.fail_replica(1)
    assert 1 not in cl.departed
    cl.add_replica(1)
    cl.pump()
    assert cl.states_equal()


def test_sync_time_estimate_counts_pending_work(cl):
    assert cl.estimate_sync_time(dp=1.0) == 0.0
    drive(cl, 3)
    work = sum(t.exec_time for t in cl.buffer.all())
    assert cl.estimate_sync_time(dp=2.0) == pytest.approx(work / 2)
    image = len(cl.seed.image.encode())
    assert cl.estimate_sync_time(bandwidth=image, dp=1.0) == pytest.approx(1 + work)


def test_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(replicas=-1)
    with pytest.raises(ValueError):
        ClusterConfig(workers=0)
