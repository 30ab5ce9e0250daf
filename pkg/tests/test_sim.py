import pytest

from gssirepl.cluster import ClusterConfig, FaultEvent
from gssirepl.harness.metrics import CSV_COLUMNS, percentile
from gssirepl.harness.sim import SimParams, Simulation, compare_replay_modes, run_experiment
from gssirepl.harness.workload import load_spec
from gssirepl.txmanager import ConsistencyLevel, LBMode


def small(name="kv-balanced", txns=600, **kw):
    return run_experiment(ClusterConfig(replicas=2), load_spec(name), txns=txns, seed=2, **kw)


def test_percentile_nearest_rank():
    assert percentile([], 99) == 0.0
    assert percentile([5, 1, 3], 50) == 3
    assert percentile(list(range(1, 101)), 99) == 99


def test_report_invariants_on_a_normal_run():
    rep = small()
    rep.check()
    assert rep.client_errors == 0 and rep.gssi_violations == 0
    assert rep.write_overlap_violations == 0 and rep.atomicity_violations == 0
    assert rep.final_state_equal and rep.gssi_checked > 0
    assert rep.total.committed + rep.total.aborted <= rep.attempted


def test_csv_is_byte_identical_for_same_seed():
    a, b = small().to_csv(), small().to_csv()
    assert a == b
    assert a.splitlines()[0] == ",".join(CSV_COLUMNS)
    assert a != small(txns=601).to_csv()


def test_faults_start_phases():
    rep = small(faults=[FaultEvent("fail-buffer", 200), FaultEvent("recover-buffer", 300)])
    assert [p.phase for p in rep.phases] == ["steady", "fail-buffer", "recover-buffer"]
    assert rep.client_errors == 0 and rep.final_state_equal


def test_unknown_fault_kind():
    with pytest.raises(ValueError):
        small(faults=[FaultEvent("explode", 10)])


@pytest.mark.parametrize("level", list(ConsistencyLevel))
def test_every_level_converges(level):
    rep = small("order-mix", txns=300, level=level)
    assert rep.client_errors == 0 and rep.final_state_equal
    if level is ConsistencyLevel.ONE_SR:
        assert rep.one_sr_checked > 0 and rep.one_sr_violations == 0


def test_weak_si_observes_staleness_gssi_does_not():
    weak = small("adversarial", level=ConsistencyLevel.WEAK_SI)
    gssi = small("adversarial", level=ConsistencyLevel.GSSI)
    assert weak.staleness > 0
    assert gssi.staleness == 0 and gssi.gssi_violations == 0


def test_transaction_mode_reads_more_from_primary():
    stmt = small("order-mix", txns=400, lb=LBMode.STMT)
    txn = small("order-mix", txns=400, lb=LBMode.TXN)
    assert stmt.primary_read_fraction < txn.primary_read_fraction


def test_zero_replicas_serves_everything_from_primary():
    rep = run_experiment(ClusterConfig(replicas=0), load_spec("kv-read-heavy"), txns=200, seed=1)
    assert rep.primary_read_fraction == 1.0 and rep.client_errors == 0


def test_parallel_and_serial_replay_agree():
    cmp = compare_replay_modes(load_spec("order-mix"), replicas=2, txns=300, seed=4)
    assert cmp.states_equal
    assert cmp.parallel.final_state_equal and cmp.serial.final_state_equal
    assert cmp.parallel.dp_max >= cmp.serial.dp_max == 1


def test_archiving_and_periodic_seeds_keep_no_loss(tmp_path):
    cfg = ClusterConfig(replicas=2, archive_period=50, seed_period=3,
                        archive_path=str(tmp_path / "arch.log"))
    sim = Simulation(cfg, load_spec("kv-write-heavy"), txns=600, seed=1,
                     params=SimParams(check_no_loss=True))
    rep = sim.run()
    assert rep.final_state_equal and sim.cluster.seed.tsid > 0
