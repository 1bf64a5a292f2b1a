"""End-to-end experiment orchestration.

Wires feeder scenario -> PMU emulators -> VOs -> DSSE service and accounts
every byte on the way. Two execution styles share all component logic:

* virtual clock: single-threaded in-process pipeline, deterministic for a
  given seed (byte accounting is clock-independent); optionally delivers
  reports out of order through a seeded reorder buffer to exercise the
  alignment semantics;
* wall clock: real sockets on loopback (PMU TCP streams, VO HTTP POSTs
  with injected WAN delay), producing the latency records behind the
  IEC 61850 transfer-time evaluation.

Artifacts directory: ``experiment.kv`` (config echo), ``records.log``,
``ledger.csv``, ``records.csv``, ``latency.csv`` (wall runs),
``emissions.csv``, ``rate_trace.csv``, ``deliveries.csv`` (virtual runs),
``truth.csv`` and ``summary.kv``/``summary.txt``.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path

from .bench import (
    PAPER_FILTERED_BYTES,
    PAPER_FRAME_BYTES,
    LatencyRecord,
    LoadLedger,
    latency_to_csv,
)
from .clock import WallClock, WanDelay
from .emulator import PmuConfig, connect_and_stream, frames
from .grid import (
    GridModel,
    ScenarioScript,
    TruthSeries,
    load_grid_model,
    load_scenario,
    run_scenario,
)
from .kv import KvDocument, KvFormatError, load_kv, save_kv
from .recordlog import RecordLog, records_to_csv
from .service import DsseApp, DsseHttpServer
from .vo import FilterSpec, VoConfig, VoCore
from .voserver import VoServer
from .wire import encode_frame, frame_size

MODES = ("fixed-50", "adaptive", "adaptive+filtered")


@dataclass
class ExperimentConfig:
    model: GridModel
    scenario: ScenarioScript
    out_dir: Path
    mode: str = "adaptive"
    clock: str = "virtual"              # virtual | wall
    wan_delay_ms: float = 40.0
    wan_jitter_ms: float = 5.0
    seed: int = 1
    noise: str = "default"              # default | zero
    byte_accounting: str = "paper"      # paper | measured
    paper_frame_bytes: int = PAPER_FRAME_BYTES
    paper_filtered_bytes: int = PAPER_FILTERED_BYTES
    pseudo_mode: str = "profile"        # profile | truth
    reorder_window: int = 0
    artifacts: str = "full"             # full | light
    check: bool = False
    raise_threshold: float = 0.02
    lower_threshold: float = 0.001

    def __post_init__(self):
        if self.mode not in MODES:
            raise KvFormatError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.clock not in ("virtual", "wall"):
            raise KvFormatError(f"clock must be virtual|wall, got {self.clock!r}")
        if self.byte_accounting not in ("paper", "measured"):
            raise KvFormatError("byte_accounting must be paper|measured")
        if self.pseudo_mode not in ("profile", "truth"):
            raise KvFormatError("pseudo_mode must be profile|truth")
        if not self.model.pmu_nodes:
            raise KvFormatError("model has no PMU nodes annotated")

    @property
    def filtered(self) -> bool:
        return self.mode == "adaptive+filtered"

    def report_bytes(self, report_json_len: int) -> int:
        if self.byte_accounting == "measured":
            return report_json_len
        return self.paper_filtered_bytes if self.filtered else self.paper_frame_bytes

    def frame_bytes(self, wire_len: int) -> int:
        return wire_len if self.byte_accounting == "measured" else self.paper_frame_bytes


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    out_dir: Path
    ledger: LoadLedger
    rate_traces: dict[str, list[tuple[float, int, int]]]
    emissions: dict[str, list[tuple[float, float, int]]]  # vo -> (t_s, vmag, rr)
    latencies: list[LatencyRecord]
    summary: dict
    checks: list[CheckResult] = field(default_factory=list)
    app: DsseApp | None = None
    truth: TruthSeries | None = None

    @property
    def all_checks_passed(self) -> bool:
        return all(c.passed for c in self.checks)


class _ReorderBuffer:
    """Holds up to ``window`` reports, releasing a random one when full."""

    def __init__(self, window: int, rng: random.Random):
        self.window = window
        self.rng = rng
        self._held: list = []

    def push(self, item) -> list:
        if self.window <= 1:
            return [item]
        self._held.append(item)
        if len(self._held) < self.window:
            return []
        return [self._held.pop(self.rng.randrange(len(self._held)))]

    def drain(self) -> list:
        out = []
        while self._held:
            out.append(self._held.pop(self.rng.randrange(len(self._held))))
        return out


def _vo_config(cfg: ExperimentConfig, node: int) -> VoConfig:
    return VoConfig(
        vo_id=f"vo-{node}",
        node=node,
        raise_threshold=cfg.raise_threshold,
        lower_threshold=cfg.lower_threshold,
        filter_spec=FilterSpec.phasors_only() if cfg.filtered else FilterSpec.full(),
        fixed_rr=50 if cfg.mode == "fixed-50" else None,
    )


def _pmu_config(cfg: ExperimentConfig, node: int,
                endpoint=None) -> PmuConfig:
    zero = cfg.noise == "zero"
    return PmuConfig(
        idcode=node,
        node=node,
        endpoint=endpoint,
        sigma_mag=0.0 if zero else 2e-4,
        sigma_ang=0.0 if zero else 1e-4,
        seed=cfg.seed * 1000 + node,
    )


def _make_app(cfg: ExperimentConfig, truth: TruthSeries, log: RecordLog,
              worker: bool) -> DsseApp:
    model, scenario = cfg.model, cfg.scenario
    registry = {f"vo-{node}": node for node in model.pmu_nodes}
    epoch = scenario.epoch_soc

    def loads_at(trigger_s: float):
        return scenario.loads_at(model.loads, trigger_s - epoch)

    truth_profile = None
    if cfg.pseudo_mode == "truth":
        period = scenario.sample_period_s

        def truth_profile(trigger_s: float):
            tick = round((trigger_s - epoch) / period)
            tick = min(max(tick, 0), len(truth) - 1)
            return {n: complex(truth.voltages[n][tick]) for n in model.nodes}

    return DsseApp(model, registry, log, pseudo_loads=loads_at,
                   truth_profile=truth_profile, worker=worker)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth = run_scenario(cfg.model, cfg.scenario)
    if cfg.clock == "virtual":
        result = _run_virtual(cfg, truth, out)
    else:
        result = _run_wall(cfg, truth, out)
    result.checks = run_checks(result)
    _write_artifacts(result, truth)
    return result


def _run_virtual(cfg: ExperimentConfig, truth: TruthSeries,
                 out: Path) -> ExperimentResult:
    log = RecordLog(out / "records.log")
    app = _make_app(cfg, truth, log, worker=False)
    ledger = LoadLedger(byte_source=cfg.byte_accounting)
    nodes = sorted(cfg.model.pmu_nodes)
    cores: dict[int, VoCore] = {n: _vo_config(cfg, n).make_core() for n in nodes}
    streams = {n: frames(_pmu_config(cfg, n), truth) for n in nodes}
    reorder = _ReorderBuffer(cfg.reorder_window, random.Random(cfg.seed + 77))

    emissions: dict[str, list] = {f"vo-{n}": [] for n in nodes}
    deliveries: list[tuple[str, int, int]] = []

    def deliver(report):
        deliveries.append((report.vo_id, report.timestamp.soc,
                           report.timestamp.frac))
        ack = app.ingest_report(report)
        if ack.status == "rejected":
            raise AssertionError(f"pipeline bug: report rejected: {ack.diagnostic}")

    for tick in range(len(truth)):
        for node in nodes:
            frame = next(streams[node])
            data = encode_frame(frame)
            t = frame.timestamp.seconds()
            core = cores[node]
            ledger.account(f"pmu->vo:vo-{node}", cfg.frame_bytes(len(data)), t)
            report = core.ingest_bytes(data)
            if report is None:
                continue
            nbytes = cfg.report_bytes(len(report.to_json().encode("utf-8"))
                                      if cfg.byte_accounting == "measured" else 0)
            ledger.account(f"vo->cloud:{report.vo_id}", nbytes, t)
            emissions[report.vo_id].append(
                (t, next(iter(report.phasors.values())).magnitude, report.rr)
            )
            for released in reorder.push(report):
                deliver(released)
    for released in reorder.drain():
        deliver(released)

    log.close()
    rate_traces = {f"vo-{n}": list(cores[n].rate_trace) for n in nodes}
    summary = _summarize(cfg, ledger, rate_traces, emissions, [], app)
    result = ExperimentResult(cfg, out, ledger, rate_traces, emissions, [],
                              summary, app=app, truth=truth)
    _write_deliveries(out, deliveries)
    return result


def _run_wall(cfg: ExperimentConfig, truth: TruthSeries,
              out: Path) -> ExperimentResult:
    log = RecordLog(out / "records.log")
    app = _make_app(cfg, truth, log, worker=True)
    ledger = LoadLedger(byte_source=cfg.byte_accounting)
    ledger_lock = threading.Lock()

    def account(link: str, nbytes: int, ts: float) -> None:
        if cfg.byte_accounting == "paper":
            nbytes = (cfg.paper_filtered_bytes
                      if cfg.filtered and link.startswith("vo->cloud")
                      else cfg.paper_frame_bytes)
        with ledger_lock:
            ledger.account(link, nbytes, ts)

    http_server = DsseHttpServer(("127.0.0.1", 0), app)
    http_server.serve_in_background()
    host, port = http_server.server_address
    endpoint = f"http://{host}:{port}/report"

    nodes = sorted(cfg.model.pmu_nodes)
    servers: dict[int, VoServer] = {}
    for node in nodes:
        vo_cfg = replace(_vo_config(cfg, node), listen=("127.0.0.1", 0),
                         endpoint=endpoint)
        wan = WanDelay(cfg.wan_delay_ms, cfg.wan_jitter_ms,
                       seed=cfg.seed * 31 + node)
        server = VoServer(vo_cfg, wan=wan, account=account)
        server.start()
        servers[node] = server

    pmu_threads = []
    for node in nodes:
        pmu_cfg = _pmu_config(cfg, node, endpoint=servers[node].ingest_address)
        thread = threading.Thread(
            target=connect_and_stream,
            args=(pmu_cfg, truth, WallClock()),
            daemon=True, name=f"pmu-{node}",
        )
        pmu_threads.append(thread)
    for thread in pmu_threads:
        thread.start()
    for thread in pmu_threads:
        thread.join()
    for server in servers.values():
        server.drain()
    for server in servers.values():
        server.stop()
    http_server.shutdown()
    http_server.server_close()
    app.close()
    log.close()

    latencies: list[LatencyRecord] = []
    emissions: dict[str, list] = {}
    rate_traces: dict[str, list] = {}
    for node in nodes:
        server = servers[node]
        vo_id = server.config.vo_id
        rate_traces[vo_id] = list(server.core.rate_trace)
        emissions[vo_id] = []
        if server.delivery is not None:
            latencies.extend(server.delivery.stats.latencies)

    summary = _summarize(cfg, ledger, rate_traces, emissions, latencies, app)
    return ExperimentResult(cfg, out, ledger, rate_traces, emissions,
                            latencies, summary, app=app, truth=truth)


def _summarize(cfg, ledger, rate_traces, emissions, latencies,
               app: DsseApp) -> dict:
    duration = cfg.scenario.duration_s
    n_pmus = len(cfg.model.pmu_nodes)
    vo_cloud_frames = ledger.total_frames("vo->cloud")
    vo_cloud_bytes = ledger.total_bytes("vo->cloud")
    per_vo_fps = {
        name.split(":", 1)[1]: counters.frames / duration
        for name, counters in ledger.links.items()
        if name.startswith("vo->cloud")
    }
    summary = {
        "mode": cfg.mode,
        "clock": cfg.clock,
        "byte_accounting": cfg.byte_accounting,
        "seed": cfg.seed,
        "duration_s": duration,
        "pmu_count": n_pmus,
        "pmu_vo_bytes": ledger.total_bytes("pmu->vo"),
        "pmu_vo_frames": ledger.total_frames("pmu->vo"),
        "vo_cloud_bytes": vo_cloud_bytes,
        "vo_cloud_frames": vo_cloud_frames,
        "avg_fps_per_pmu": vo_cloud_frames / n_pmus / duration,
        "per_vo_fps": per_vo_fps,
        "bytes_per_hour_projection": (
            round(vo_cloud_bytes * 3600 / duration) if duration else 0
        ),
        "bytes_per_day_projection": (
            round(vo_cloud_bytes * 86400 / duration) if duration else 0
        ),
        "accepted": app.accepted,
        "estimations": app.estimations,
        "skipped": app.skipped,
        "errors": app.errors,
        "rate_transitions": {
            vo: [[t, old, new] for t, old, new in trace]
            for vo, trace in rate_traces.items()
        },
    }
    if latencies:
        from .bench import evaluate_tt_classes
        report = evaluate_tt_classes(latencies)
        summary["latency_samples"] = report.sample_count
        summary["avg_total_ms"] = report.classes["TT0"].average_delay_ms
        for name, row in report.classes.items():
            summary[f"dependability_{name.lower()}_pct"] = row.dependability_pct
    return summary


def run_checks(result: ExperimentResult) -> list[CheckResult]:
    """Mode-appropriate acceptance checks; drives the --check exit code."""
    cfg = result.config
    checks: list[CheckResult] = []

    try:
        result.ledger.check_consistency()
        checks.append(CheckResult("ledger-consistency", True,
                                  "per-second series sum to totals"))
    except AssertionError as exc:
        checks.append(CheckResult("ledger-consistency", False, str(exc)))

    n_pmus = len(cfg.model.pmu_nodes)
    duration = cfg.scenario.duration_s
    frames_out = result.ledger.total_frames("vo->cloud")
    bytes_out = result.ledger.total_bytes("vo->cloud")

    if cfg.byte_accounting == "paper":
        per_frame = cfg.paper_filtered_bytes if cfg.filtered else cfg.paper_frame_bytes
        exact = frames_out * per_frame == bytes_out
        checks.append(CheckResult(
            "ledger-exactness", exact,
            f"{frames_out} frames x {per_frame} B == {bytes_out} B",
        ))

    if cfg.mode == "fixed-50":
        expected = round(n_pmus * 50 * duration)
        checks.append(CheckResult(
            "fixed-frame-count", frames_out == expected,
            f"vo->cloud frames {frames_out}, expected {expected}",
        ))
        if cfg.byte_accounting == "paper" and duration == 3600:
            checks.append(CheckResult(
                "bandwidth-hour", bytes_out == 25_200_000,
                f"vo->cloud bytes {bytes_out}, expected 25200000",
            ))
    else:
        avg = frames_out / n_pmus / duration
        checks.append(CheckResult(
            "adaptive-under-15fps", avg < 15.0,
            f"average vo->cloud rate {avg:.2f} fps per PMU",
        ))
        any_transitions = any(result.rate_traces.values())
        checks.append(CheckResult(
            "rate-adaptation-active", any_transitions,
            "policy produced rate transitions"
            if any_transitions else "no rate transitions recorded",
        ))
    return checks


def _write_deliveries(out: Path, deliveries) -> None:
    with open(out / "deliveries.csv", "w", encoding="utf-8") as fh:
        fh.write("delivery_index,vo_id,soc,frac\n")
        for i, (vo_id, soc, frac) in enumerate(deliveries):
            fh.write(f"{i},{vo_id},{soc},{frac}\n")


def _write_artifacts(result: ExperimentResult, truth: TruthSeries) -> None:
    cfg = result.config
    out = result.out_dir

    result.ledger.to_csv(out / "ledger.csv")
    if result.latencies:
        latency_to_csv(result.latencies, out / "latency.csv")

    with open(out / "rate_trace.csv", "w", encoding="utf-8") as fh:
        fh.write("vo_id,time_s,old_rr,new_rr\n")
        for vo_id, trace in sorted(result.rate_traces.items()):
            for t, old, new in trace:
                fh.write(f"{vo_id},{t:.6f},{old},{new}\n")

    with open(out / "emissions.csv", "w", encoding="utf-8") as fh:
        fh.write("time_s,vo_id,vmag_pu,rr\n")
        for vo_id, rows in sorted(result.emissions.items()):
            for t, vmag, rr in rows:
                fh.write(f"{t:.6f},{vo_id},{vmag:.15g},{rr}\n")

    if cfg.artifacts == "full":
        truth.to_csv(out / "truth.csv")
        with RecordLog(out / "records.log") as log:
            records_to_csv(log.records(), out / "records.csv")

    doc = KvDocument("summary", 1)
    lines = [f"gridmesh experiment summary: mode={cfg.mode} clock={cfg.clock}"]
    for key, value in result.summary.items():
        if isinstance(value, dict):
            doc.add(key, json.dumps(value, separators=(",", ":")))
        else:
            doc.add(key, value)
        lines.append(f"  {key} = {value}")
    for check in result.checks:
        doc.add("check", f"{check.name} {'pass' if check.passed else 'FAIL'}")
        lines.append(f"  check {check.name}: "
                     f"{'pass' if check.passed else 'FAIL'} ({check.detail})")
    save_kv(doc, out / "summary.kv")
    (out / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    echo = KvDocument("experiment", 1)
    echo.add("mode", cfg.mode)
    echo.add("clock", cfg.clock)
    echo.add("seed", cfg.seed)
    echo.add("noise", cfg.noise)
    echo.add("byte_accounting", cfg.byte_accounting)
    echo.add("paper_frame_bytes", cfg.paper_frame_bytes)
    echo.add("paper_filtered_bytes", cfg.paper_filtered_bytes)
    echo.add("pseudo_mode", cfg.pseudo_mode)
    echo.add("reorder_window", cfg.reorder_window)
    echo.add("wan_delay_ms", cfg.wan_delay_ms)
    echo.add("wan_jitter_ms", cfg.wan_jitter_ms)
    echo.add("model_name", cfg.model.name)
    echo.add("scenario_name", cfg.scenario.name)
    echo.add("pmu_nodes", " ".join(str(n) for n in cfg.model.pmu_nodes))
    save_kv(echo, out / "experiment.kv")


def experiment_from_kv(doc: KvDocument, out_dir=None) -> ExperimentConfig:
    if doc.doctype != "experiment":
        raise KvFormatError(f"expected gridmesh/experiment, got {doc.doctype}")
    model = load_grid_model(doc.require("model"))
    scenario = load_scenario(doc.require("scenario"))
    return ExperimentConfig(
        model=model,
        scenario=scenario,
        out_dir=Path(out_dir or doc.get("out", "run-artifacts")),
        mode=doc.get("mode", "adaptive"),
        clock=doc.get("clock", "virtual"),
        wan_delay_ms=doc.get_float("wan_delay_ms", 40.0),
        wan_jitter_ms=doc.get_float("wan_jitter_ms", 5.0),
        seed=doc.get_int("seed", 1),
        noise=doc.get("noise", "default"),
        byte_accounting=doc.get("byte_accounting", "paper"),
        paper_frame_bytes=doc.get_int("paper_frame_bytes", PAPER_FRAME_BYTES),
        paper_filtered_bytes=doc.get_int("paper_filtered_bytes",
                                         PAPER_FILTERED_BYTES),
        pseudo_mode=doc.get("pseudo_mode", "profile"),
        reorder_window=doc.get_int("reorder_window", 0),
        artifacts=doc.get("artifacts", "full"),
    )


def load_experiment(path, out_dir=None) -> ExperimentConfig:
    return experiment_from_kv(load_kv(path, "experiment"), out_dir)
