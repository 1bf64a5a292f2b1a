"""Byte/latency accounting and IEC 61850 transfer-time evaluation.

The load ledger counts frames and bytes per link with per-second buckets;
byte sizes come either from the actual serialized payload ("measured") or
from fixed per-frame constants ("paper"), the latter matching the
published bandwidth arithmetic where every PMU message counts as 70 bytes
and a timestamp+phasor-only report counts as its 16-byte information
content.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

# Fixed constants for paper-comparison accounting. The filtered constant
# is the information content kept by a phasors-only report: SOC(4) +
# FRACSEC(4) + one rectangular float32 phasor (8).
PAPER_FRAME_BYTES = 70
PAPER_FILTERED_BYTES = 16

TT_THRESHOLDS_MS: dict[str, float | None] = {
    "TT0": None,       # no finite bound
    "TT1": 1000.0,
    "TT2": 500.0,
}


@dataclass
class LinkCounters:
    frames: int = 0
    bytes: int = 0
    per_second: dict[int, list[int]] = field(default_factory=dict)  # sec -> [frames, bytes]

    def add(self, nbytes: int, second: int) -> None:
        self.frames += 1
        self.bytes += nbytes
        bucket = self.per_second.setdefault(second, [0, 0])
        bucket[0] += 1
        bucket[1] += nbytes


@dataclass
class LoadLedger:
    """Exact integer byte accounting per link."""

    byte_source: str = "measured"   # measured | paper
    links: dict[str, LinkCounters] = field(default_factory=dict)

    def account(self, link: str, nbytes: int, ts_seconds: float) -> None:
        if nbytes < 0:
            raise ValueError("byte count must be non-negative")
        self.links.setdefault(link, LinkCounters()).add(int(nbytes),
                                                        int(ts_seconds))

    def total_bytes(self, prefix: str = "") -> int:
        return sum(c.bytes for name, c in self.links.items()
                   if name.startswith(prefix))

    def total_frames(self, prefix: str = "") -> int:
        return sum(c.frames for name, c in self.links.items()
                   if name.startswith(prefix))

    def check_consistency(self) -> None:
        """Per-second series must sum exactly to the totals."""
        for name, counters in self.links.items():
            frames = sum(b[0] for b in counters.per_second.values())
            nbytes = sum(b[1] for b in counters.per_second.values())
            if frames != counters.frames or nbytes != counters.bytes:
                raise AssertionError(f"ledger inconsistency on link {name}")

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("link,second,frames,bytes\n")
            for name in sorted(self.links):
                counters = self.links[name]
                for second in sorted(counters.per_second):
                    frames, nbytes = counters.per_second[second]
                    fh.write(f"{name},{second},{frames},{nbytes}\n")


@dataclass(frozen=True)
class LatencyRecord:
    """Per-report delay breakdown; total = network + estimation + persist."""

    network_ms: float
    est_ms: float
    persist_ms: float
    total_ms: float
    injected_one_way_ms: float = 0.0


def latency_to_csv(records: list[LatencyRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("network_ms,est_ms,persist_ms,total_ms,injected_one_way_ms\n")
        for r in records:
            fh.write(f"{r.network_ms:.3f},{r.est_ms:.3f},{r.persist_ms:.3f},"
                     f"{r.total_ms:.3f},{r.injected_one_way_ms:.3f}\n")


def latency_from_csv(path) -> list[LatencyRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "network_ms,est_ms,persist_ms,total_ms,injected_one_way_ms":
            raise ValueError(f"unexpected latency CSV header: {header!r}")
        for line in fh:
            if line.strip():
                net, est, per, total, inj = (float(v) for v in line.split(","))
                out.append(LatencyRecord(net, est, per, total, inj))
    return out


@dataclass(frozen=True)
class TtClassRow:
    threshold_ms: float | None
    dependability_pct: float
    average_delay_ms: float


@dataclass(frozen=True)
class TtClassReport:
    classes: dict[str, TtClassRow]
    sample_count: int

    def dump(self) -> str:
        lines = [f"samples = {self.sample_count}"]
        for name, row in self.classes.items():
            bound = "none" if row.threshold_ms is None else f"{row.threshold_ms:.0f} ms"
            lines.append(
                f"{name}: threshold {bound}, dependability "
                f"{row.dependability_pct:.2f}%, average delay "
                f"{row.average_delay_ms:.1f} ms"
            )
        return "\n".join(lines)


def evaluate_tt_classes(latencies: list[LatencyRecord]) -> TtClassReport:
    """Dependability per IEC 61850 class over one shared sample set."""
    if not latencies:
        raise ValueError("empty latency set")
    totals = [r.total_ms for r in latencies]
    if not all(math.isfinite(t) for t in totals):
        raise ValueError("non-finite latency sample")
    average = sum(totals) / len(totals)
    classes = {}
    for name, threshold in TT_THRESHOLDS_MS.items():
        if threshold is None:
            under = len(totals)
        else:
            under = sum(1 for t in totals if t < threshold)
        classes[name] = TtClassRow(
            threshold_ms=threshold,
            dependability_pct=100.0 * under / len(totals),
            average_delay_ms=average,
        )
    return TtClassReport(classes=classes, sample_count=len(totals))
