"""Command line: ``run`` an experiment, ``verify`` the oracle suite, print the ``golden`` example."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .. import golden
from ..cluster import ClusterConfig, FaultEvent
from ..rwsets import Granularity
from ..txmanager import ConsistencyLevel, LBMode
from .checks import run_all
from .sim import SimParams, run_experiment
from .workload import SpecValidation, load_spec


def _window(text: str) -> tuple[int, int]:
    try:
        start, end = (int(p) for p in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected E1:E2, got {text!r}") from None
    if not 0 <= start < end:
        raise argparse.ArgumentTypeError(f"window {text!r} must satisfy 0 <= E1 < E2")
    return start, end


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gssirepl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate a replicated cluster under a workload")
    run.add_argument("--replicas", type=_nonneg, default=2)
    run.add_argument("--clients", type=int, default=None, help="default: from the workload file")
    run.add_argument("--txns", type=_nonneg, default=None, help="default: from the workload file")
    run.add_argument("--mix", default="kv-balanced", help="built-in spec name or spec file path")
    run.add_argument("--level", choices=[c.value for c in ConsistencyLevel], default="gssi")
    run.add_argument("--granularity", choices=[g.value for g in Granularity], default="all")
    run.add_argument("--lb", choices=[m.value for m in LBMode], default="stmt")
    run.add_argument("--seed", type=int, default=None, help="default: from the workload file")
    run.add_argument("--workers", type=int, default=8, help="replay workers per replica")
    run.add_argument("--serial-replay", action="store_true")
    run.add_argument("--fail-buffer-at", type=_window, metavar="E1:E2")
    run.add_argument("--remove-replica-at", type=_nonneg, metavar="E")
    run.add_argument("--add-replica-at", type=_nonneg, metavar="E")
    run.add_argument("--archive-path", help="file backing the archiver buffer")
    run.add_argument("--no-gssi-check", action="store_true",
                     help="skip the per-read snapshot oracle (faster)")
    run.add_argument("--out", help="write the metrics CSV here instead of stdout")

    verify = sub.add_parser("verify", help="run the invariant and oracle suite")
    verify.add_argument("--quick", action="store_true", help="fewer replay batches")

    sub.add_parser("golden", help="print the worked example's sets, TSIDs and indexes")
    return parser


def faults_from(args: argparse.Namespace) -> list[FaultEvent]:
    faults = []
    if args.fail_buffer_at:
        faults += [FaultEvent("fail-buffer", args.fail_buffer_at[0]),
                   FaultEvent("recover-buffer", args.fail_buffer_at[1])]
    if args.remove_replica_at is not None:
        faults.append(FaultEvent("remove-replica", args.remove_replica_at))
    if args.add_replica_at is not None:
        faults.append(FaultEvent("add-replica", args.add_replica_at))
    return sorted(faults, key=lambda f: f.at)


def cmd_run(args: argparse.Namespace) -> int:
    try:
        spec = load_spec(args.mix)
    except SpecValidation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    cfg = ClusterConfig(replicas=args.replicas, workers=args.workers,
                        serial_replay=args.serial_replay,
                        granularity=Granularity(args.granularity),
                        archive_path=args.archive_path)
    report = run_experiment(cfg, spec, ConsistencyLevel(args.level), lb=LBMode(args.lb),
                            faults=faults_from(args), seed=args.seed, clients=args.clients,
                            txns=args.txns, params=SimParams(check_gssi=not args.no_gssi_check))
    csv_text = report.to_csv()
    if args.out:
        with open(args.out, "w", newline="") as fh:
            fh.write(csv_text)
    else:
        sys.stdout.write(csv_text)
    print(report.summary(), file=sys.stderr)
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    failed = 0
    for result in run_all(quick=args.quick):
        print(result.line(), flush=True)
        failed += not (result.ok and result.in_time)
    return 1 if failed else 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "verify":
        return cmd_verify(args)
    print(golden.report())
    return 0


if __name__ == "__main__":
    sys.exit(main())
