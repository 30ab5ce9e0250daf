"""Experiment metrics and CSV emission."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional

CSV_COLUMNS = ("phase", "txns_committed", "txns_aborted", "throughput", "lat_mean", "lat_p99",
               "reads_primary", "reads_replica", "waits", "min_watermark", "max_tsid")


class InvariantViolation(AssertionError):
    """An online checker fired; carries a forensic dump of recent events."""

    def __init__(self, message: str, forensics: str = ""):
        super().__init__(message + ("\n" + forensics if forensics else ""))
        self.forensics = forensics


def percentile(values: list[float], q: float) -> float:
    """Nearest-rank percentile; 0 for an empty sample."""
    if not values:
        return 0.0
    ordered = sorted(values)
    rank = max(1, math.ceil(q / 100.0 * len(ordered)))
    return ordered[min(rank, len(ordered)) - 1]


@dataclass
class PhaseStats:
    phase: str
    start: float
    end: float = 0.0
    committed: int = 0
    aborted: int = 0
    write_committed: int = 0
    latencies: list = field(default_factory=list)
    reads_primary: int = 0
    reads_replica: int = 0
    waits: int = 0
    min_watermark: int = 0
    max_tsid: int = 0

    @property
    def duration(self) -> float:
        return max(self.end - self.start, 0.0)

    @property
    def throughput(self) -> float:
        return self.committed / self.duration if self.duration > 0 else 0.0

    @property
    def write_throughput(self) -> float:
        return self.write_committed / self.duration if self.duration > 0 else 0.0

    @property
    def lat_mean(self) -> float:
        return sum(self.latencies) / len(self.latencies) if self.latencies else 0.0

    @property
    def lat_p99(self) -> float:
        return percentile(self.latencies, 99)

    @property
    def primary_read_fraction(self) -> float:
        routed = self.reads_primary + self.reads_replica
        return self.reads_primary / routed if routed else 0.0

    def row(self) -> list[str]:
        return [self.phase, str(self.committed), str(self.aborted), f"{self.throughput:.6f}",
                f"{self.lat_mean:.6f}", f"{self.lat_p99:.6f}", str(self.reads_primary),
                str(self.reads_replica), str(self.waits), str(self.min_watermark),
                str(self.max_tsid)]


@dataclass
class MetricsReport:
    label: str
    phases: list = field(default_factory=list)
    total: Optional[PhaseStats] = None
    attempted: int = 0
    client_errors: int = 0
    resubmits: int = 0
    gssi_checked: int = 0
    gssi_violations: int = 0
    staleness: int = 0
    write_overlap_violations: int = 0
    atomicity_violations: int = 0
    one_sr_checked: int = 0
    one_sr_violations: int = 0
    granularity_checked: int = 0
    granularity_violations: int = 0
    dp_mean: float = 0.0
    dp_max: int = 0
    replica_lag_mean: float = 0.0
    final_state_equal: Optional[bool] = None
    reseeds: int = 0

    @property
    def throughput(self) -> float:
        return self.total.throughput if self.total else 0.0

    @property
    def write_throughput(self) -> float:
        return self.total.write_throughput if self.total else 0.0

    @property
    def primary_read_fraction(self) -> float:
        return self.total.primary_read_fraction if self.total else 0.0

    def check(self) -> None:
        t = self.total
        if t is not None:
            routed = t.reads_primary + t.reads_replica
            assert routed == 0 or abs(t.reads_primary / routed + t.reads_replica / routed - 1) < 1e-9

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for p in self.phases:
            w.writerow(p.row())
        if self.total is not None:
            w.writerow(self.total.row())
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{self.label}: throughput={self.throughput:.4f} "
                 f"write_throughput={self.write_throughput:.4f} "
                 f"primary_read_fraction={self.primary_read_fraction:.3f}",
                 f"  attempted={self.attempted} committed={self.total.committed if self.total else 0} "
                 f"aborted={self.total.aborted if self.total else 0} errors={self.client_errors} "
                 f"resubmits={self.resubmits}",
                 f"  gssi checked={self.gssi_checked} violations={self.gssi_violations} "
                 f"staleness={self.staleness} write_overlap={self.write_overlap_violations} "
                 f"atomicity={self.atomicity_violations} granularity={self.granularity_violations}"
                 f"/{self.granularity_checked} 1sr={self.one_sr_violations}/{self.one_sr_checked}",
                 f"  dp mean={self.dp_mean:.2f} max={self.dp_max} lag={self.replica_lag_mean:.2f} "
                 f"state_equal={self.final_state_equal}"]
        return "\n".join(lines)
