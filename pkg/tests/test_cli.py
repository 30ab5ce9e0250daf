import csv

import pytest

from gssirepl.harness.cli import build_parser, faults_from, main


def test_golden_prints_indexes(capsys):
    assert main(["golden"]) == 0
    out = capsys.readouterr().out
    for line in ("T|R|14", "T|S|15", "C|R.A3|13", "R|R.A1=100|11", "R1 class=TAS consistent_tsid=14"):
        assert line in out


def test_run_writes_csv(tmp_path, capsys):
    out = tmp_path / "m.csv"
    rc = main(["run", "--replicas", "2", "--clients", "4", "--txns", "300", "--mix",
               "order-mix", "--seed", "3", "--fail-buffer-at", "50:100",
               "--remove-replica-at", "120", "--add-replica-at", "200", "--out", str(out)])
    assert rc == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["phase"] for r in rows] == ["steady", "fail-buffer", "recover-buffer",
                                          "remove-replica", "add-replica", "total"]
    assert "state_equal=True" in capsys.readouterr().err


def test_run_to_stdout(capsys):
    assert main(["run", "--txns", "100", "--level", "rsi-pc", "--granularity", "cas",
                 "--lb", "txn", "--no-gssi-check"]) == 0
    assert capsys.readouterr().out.startswith("phase,txns_committed")


def test_bad_mix_is_an_error(capsys):
    assert main(["run", "--mix", "nope", "--txns", "1"]) == 2
    assert "nope" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["run", "--fail-buffer-at", "5"],
                                  ["run", "--fail-buffer-at", "9:3"],
                                  ["run", "--level", "strict"],
                                  ["run", "--replicas", "-1"], []])
def test_argument_errors(argv):
    with pytest.raises(SystemExit):
        build_parser().parse_args(argv)


def test_fault_schedule_sorted():
    args = build_parser().parse_args(["run", "--fail-buffer-at", "10:40",
                                      "--remove-replica-at", "20"])
    assert [(f.kind, f.at) for f in faults_from(args)] == [
        ("fail-buffer", 10), ("remove-replica", 20), ("recover-buffer", 40)]
