"""Cloud-side DSSE application.

Every accepted VO report triggers one estimation for the timestamp the
report carries. The alignment buffer keeps the freshest report per VO
(most-recent timestamp wins, so late or reordered deliveries never
regress it); each estimation snapshots that buffer, flags sources older
than the staleness horizon, assembles PMU voltage rows plus load
pseudomeasurements, and runs the branch-current WLS against a gain matrix
that is factorized once per measurement configuration.

Estimations are serialized through a single consumer. In worker mode the
pending-trigger queue is bounded: on overflow the oldest pending trigger
is answered as "skipped" (and counted) so the newest data always gets
estimated. Pseudomeasurement injections are re-linearized every trigger
at the previous estimate's voltage profile (flat 1 pu at cold start), but
their variances stay pinned to the cached configuration so the gain
matrix never needs rebuilding.
"""

from __future__ import annotations

import json
import threading
import time
from collections import deque
from concurrent.futures import Future
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

import numpy as np

from .broker import Broker, Command
from .estimator import (
    INJECTION,
    VOLTAGE,
    EstimatorError,
    Measurement,
    MeasurementSet,
    MeasurementSpec,
    build_gain,
    estimate,
    pseudo_variance,
)
from .grid import GridModel
from .kv import KvDocument, KvFormatError, apply_env_overrides, load_kv
from .recordlog import RecordLog
from .vo import VoReport

STALENESS_HORIZON_S = 2.0


@dataclass
class IngestAck:
    status: str                      # ok | rejected | skipped | error
    seq: int | None = None
    diagnostic: str | None = None
    queue_ms: float | None = None
    est_ms: float | None = None
    persist_ms: float | None = None
    command: dict | None = None
    record: dict | None = None       # in-memory copy; not sent over HTTP

    def to_http(self) -> dict:
        doc = {"status": self.status}
        for key in ("seq", "diagnostic", "queue_ms", "est_ms", "persist_ms",
                    "command"):
            value = getattr(self, key)
            if value is not None:
                doc[key] = value
        return doc


class AlignmentBuffer:
    """Freshest report per VO; staleness judged against a trigger time."""

    def __init__(self, horizon_s: float = STALENESS_HORIZON_S):
        self.horizon_s = horizon_s
        self._latest: dict[str, VoReport] = {}
        self._lock = threading.Lock()

    def update(self, report: VoReport) -> None:
        with self._lock:
            current = self._latest.get(report.vo_id)
            if current is None or report.timestamp >= current.timestamp:
                self._latest[report.vo_id] = report

    def snapshot(self) -> dict[str, VoReport]:
        with self._lock:
            return dict(self._latest)

    def staleness(self, report: VoReport, trigger_s: float) -> tuple[bool, float]:
        stale_by = trigger_s - report.timestamp.seconds()
        return (stale_by > self.horizon_s, max(0.0, stale_by))


@dataclass(frozen=True)
class CommandRule:
    """Voltage-limit rule mapping an estimate to a command.

    ``target`` is either ``vo:<vo_id>`` (one-to-one: the command rides the
    next POST ack of that VO) or ``topic:<topic>`` (one-to-many fan-out
    through the broker). Fires on the rising edge of the condition.
    """

    node: int
    limit_pu: float
    target: str
    action: str = "alert"
    direction: str = "over"   # over | under
    qos: int = 0

    def condition(self, voltages: dict[int, complex]) -> bool:
        if self.node not in voltages:
            return False
        mag = abs(voltages[self.node])
        return mag > self.limit_pu if self.direction == "over" else mag < self.limit_pu


class DsseApp:
    """Transport-agnostic service core; HTTP is layered on top."""

    def __init__(
        self,
        model: GridModel,
        registry: dict[str, int],
        log: RecordLog,
        *,
        staleness_horizon_s: float = STALENESS_HORIZON_S,
        pmu_sigma: float = 1e-3,
        pseudo_sigma_fraction: float = 0.3,
        pseudo_sigma_floor: float = 0.03,
        pseudo_loads=None,       # callable(trigger_s) -> {node: complex}
        truth_profile=None,      # callable(trigger_s) -> {node: complex}
        broker: Broker | None = None,
        rules: tuple[CommandRule, ...] = (),
        worker: bool = False,
        queue_depth: int = 4096,
    ):
        self.model = model
        self.registry = dict(registry)
        unknown = [n for n in self.registry.values() if n not in model.nodes]
        if unknown:
            raise KvFormatError(f"registered VOs at unknown nodes: {unknown}")
        self.log = log
        self.buffer = AlignmentBuffer(staleness_horizon_s)
        self.pmu_sigma = pmu_sigma
        self.pseudo_sigma_fraction = pseudo_sigma_fraction
        self.pseudo_sigma_floor = pseudo_sigma_floor
        self.pseudo_loads = pseudo_loads or (lambda t: self.model.loads)
        self.truth_profile = truth_profile
        self.broker = broker
        self.rules = tuple(rules)
        self._rule_armed = {i: True for i in range(len(self.rules))}

        self._caches: dict[frozenset, object] = {}
        self._pseudo_vars = {
            node: pseudo_variance(model.loads.get(node, 0j),
                                  pseudo_sigma_fraction, pseudo_sigma_floor)
            for node in model.nodes[1:]
        }
        self._profile: dict[int, complex] = {n: 1.0 + 0j for n in model.nodes}
        self._pending_commands: dict[str, Command] = {}

        self._state_lock = threading.Lock()
        self.accepted = 0
        self.rejected = 0
        self.estimations = 0
        self.errors = 0
        self.skipped = 0

        self._pipeline = _EstimationPipeline(self._execute, worker, queue_depth,
                                             self._on_skip)

    # -- ingest -------------------------------------------------------------

    def ingest_report(self, report) -> IngestAck:
        t_recv = time.perf_counter()
        if isinstance(report, dict):
            try:
                report = VoReport.from_dict(report)
            except ValueError as exc:
                with self._state_lock:
                    self.rejected += 1
                return IngestAck("rejected", diagnostic=str(exc))
        if report.vo_id not in self.registry:
            with self._state_lock:
                self.rejected += 1
            return IngestAck(
                "rejected",
                diagnostic=f"unknown vo_id {report.vo_id!r}: registration required",
            )
        if not report.phasors:
            with self._state_lock:
                self.rejected += 1
            return IngestAck("rejected", diagnostic="report carries no phasors")

        with self._state_lock:
            seq = self.accepted
            self.accepted += 1
        self.buffer.update(report)
        future = self._pipeline.submit(seq, report, t_recv)
        return future.result()

    # -- estimation ---------------------------------------------------------

    def _cache_for(self, present: frozenset):
        cache = self._caches.get(present)
        if cache is None:
            specs = [
                MeasurementSpec(VOLTAGE, self.registry[vo_id],
                                (self.pmu_sigma ** 2, self.pmu_sigma ** 2))
                for vo_id in sorted(present)
            ]
            specs += [
                MeasurementSpec(INJECTION, node, self._pseudo_vars[node])
                for node in self.model.nodes[1:]
            ]
            cache = build_gain(self.model, specs)
            self._caches[present] = cache
        return cache

    def _measured_phasor(self, report: VoReport, node: int) -> complex:
        name = f"V{node}"
        phasor = report.phasors.get(name)
        if phasor is None:
            phasor = next(iter(report.phasors.values()))
        return phasor.to_complex()

    def _execute(self, seq: int, report: VoReport, t_recv: float) -> IngestAck:
        solve_start = time.perf_counter()
        queue_ms = (solve_start - t_recv) * 1000.0
        trigger = report.timestamp
        trigger_s = trigger.seconds()

        snapshot = self.buffer.snapshot()
        present = frozenset(snapshot)
        sources = {}
        try:
            cache = self._cache_for(present)
            entries = []
            for vo_id in sorted(present):
                buffered = snapshot[vo_id]
                node = self.registry[vo_id]
                stale, stale_by = self.buffer.staleness(buffered, trigger_s)
                sources[vo_id] = {
                    "soc": buffered.timestamp.soc,
                    "frac": buffered.timestamp.frac,
                    "stale": stale,
                    "stale_by_s": round(stale_by, 6),
                }
                entries.append(Measurement(
                    VOLTAGE, node, self._measured_phasor(buffered, node),
                    (self.pmu_sigma ** 2, self.pmu_sigma ** 2), buffered.timestamp,
                ))
            loads = self.pseudo_loads(trigger_s)
            profile = (self.truth_profile(trigger_s) if self.truth_profile
                       else self._profile)
            for node in self.model.nodes[1:]:
                v_guess = profile.get(node, 1.0 + 0j)
                s = loads.get(node, 0j)
                inj = np.conj(s / v_guess) if s else 0j
                entries.append(Measurement(INJECTION, node, complex(inj),
                                           self._pseudo_vars[node], trigger))
            result = estimate(cache, MeasurementSet(entries))
        except EstimatorError as exc:
            record = {
                "seq": seq,
                "trigger": {"soc": trigger.soc, "frac": trigger.frac},
                "sources": sources,
                "error": str(exc),
            }
            t0 = time.perf_counter()
            self.log.append(record)
            persist_ms = (time.perf_counter() - t0) * 1000.0
            with self._state_lock:
                self.errors += 1
            return IngestAck("error", seq=seq, diagnostic=str(exc),
                             queue_ms=queue_ms, persist_ms=persist_ms,
                             record=record)

        self._profile = result.node_voltages
        record = {
            "seq": seq,
            "trigger": {"soc": trigger.soc, "frac": trigger.frac},
            "sources": sources,
            "branch_currents": [
                [result.state.values[2 * i], result.state.values[2 * i + 1]]
                for i in range(result.state.branch_count)
            ],
            "node_voltages": {
                str(node): [v.real, v.imag]
                for node, v in result.node_voltages.items()
            },
            "residual": result.residual_norm,
            "latency_ms": {"queue": round(queue_ms, 3),
                           "solve": round(result.solve_ms, 3)},
        }
        t0 = time.perf_counter()
        self.log.append(record)
        persist_ms = (time.perf_counter() - t0) * 1000.0

        command = self._apply_rules(result.node_voltages, trigger, report.vo_id)
        with self._state_lock:
            self.estimations += 1
            ride = self._pending_commands.pop(report.vo_id, None)
        if ride is not None:
            command = ride
        return IngestAck(
            "ok", seq=seq, queue_ms=queue_ms, est_ms=result.solve_ms,
            persist_ms=persist_ms, record=record,
            command=(None if command is None
                     else {"topic": command.topic, "payload": command.payload,
                           "qos": command.qos}),
        )

    def _apply_rules(self, voltages, trigger, reporting_vo) -> Command | None:
        ride = None
        for i, rule in enumerate(self.rules):
            fired = rule.condition(voltages)
            if not fired:
                self._rule_armed[i] = True
                continue
            if not self._rule_armed[i]:
                continue
            self._rule_armed[i] = False
            payload = {
                "action": rule.action,
                "node": rule.node,
                "vmag_pu": abs(voltages[rule.node]),
                "trigger": {"soc": trigger.soc, "frac": trigger.frac},
            }
            kind, _, detail = rule.target.partition(":")
            if kind == "topic":
                command = Command(detail, payload, rule.qos)
                if self.broker is not None:
                    self.broker.publish(command)
            elif kind == "vo":
                command = Command(f"vo/{detail}/{rule.action}", payload, rule.qos)
                if detail == reporting_vo:
                    ride = command
                else:
                    with self._state_lock:
                        self._pending_commands[detail] = command
            else:
                raise KvFormatError(f"rule target must be vo:<id> or topic:<t>: "
                                    f"{rule.target!r}")
        return ride

    def _on_skip(self, seq: int) -> IngestAck:
        with self._state_lock:
            self.skipped += 1
        return IngestAck("skipped", seq=seq,
                         diagnostic="estimation coalesced under overload")

    # -- reads --------------------------------------------------------------

    def query_results(self, t0: float, t1: float,
                      nodes: list[int] | None = None) -> list[dict]:
        return self.log.query(t0, t1, nodes)

    def health(self) -> dict:
        with self._state_lock:
            return {
                "status": "ok",
                "accepted": self.accepted,
                "rejected": self.rejected,
                "estimations": self.estimations,
                "errors": self.errors,
                "skipped": self.skipped,
                "buffer": {
                    vo: str(rep.timestamp)
                    for vo, rep in self.buffer.snapshot().items()
                },
            }

    def close(self) -> None:
        self._pipeline.close()


class _EstimationPipeline:
    """Single-consumer executor with a bounded, newest-wins queue."""

    def __init__(self, execute, worker: bool, depth: int, on_skip):
        self._execute = execute
        self._on_skip = on_skip
        self.depth = depth
        self.worker_mode = worker
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._exec_lock = threading.Lock()
        self._queue: deque = deque()
        self._stop = False
        self._thread = None
        if worker:
            self._thread = threading.Thread(target=self._loop, daemon=True,
                                            name="dsse-estimation")
            self._thread.start()

    def submit(self, seq, report, t_recv) -> Future:
        future: Future = Future()
        if not self.worker_mode:
            with self._exec_lock:
                future.set_result(self._execute(seq, report, t_recv))
            return future
        with self._cond:
            if len(self._queue) >= self.depth:
                old_seq, _, _, old_future = self._queue.popleft()
                old_future.set_result(self._on_skip(old_seq))
            self._queue.append((seq, report, t_recv, future))
            self._cond.notify()
        return future

    def _loop(self) -> None:
        while True:
            with self._cond:
                while not self._queue and not self._stop:
                    self._cond.wait(0.1)
                if self._stop and not self._queue:
                    return
                seq, report, t_recv, future = self._queue.popleft()
            try:
                future.set_result(self._execute(seq, report, t_recv))
            except Exception as exc:  # estimator bugs must not kill the consumer
                future.set_exception(exc)

    def close(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=2.0)


# ---------------------------------------------------------------------------
# HTTP front end


class _DsseHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def _send_json(self, code: int, doc: dict) -> None:
        body = json.dumps(doc, separators=(",", ":")).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_POST(self):
        app: DsseApp = self.server.app
        if urlparse(self.path).path != "/report":
            self._send_json(404, {"status": "rejected", "diagnostic": "no such path"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            doc = json.loads(self.rfile.read(length).decode("utf-8"))
            if not isinstance(doc, dict):
                raise ValueError("report must be a JSON object")
        except (ValueError, json.JSONDecodeError) as exc:
            self._send_json(400, {"status": "rejected", "diagnostic": str(exc)})
            return
        ack = app.ingest_report(doc)
        self._send_json(200 if ack.status in ("ok", "skipped") else 400,
                        ack.to_http())

    def do_GET(self):
        app: DsseApp = self.server.app
        url = urlparse(self.path)
        if url.path == "/health":
            self._send_json(200, app.health())
        elif url.path == "/results":
            params = parse_qs(url.query)
            try:
                t0 = float(params.get("from", ["0"])[0])
                t1 = float(params.get("to", ["inf"])[0])
                nodes = None
                if "nodes" in params:
                    nodes = [int(n) for n in params["nodes"][0].split(",") if n]
            except ValueError as exc:
                self._send_json(400, {"status": "rejected", "diagnostic": str(exc)})
                return
            self._send_json(200, {"records": app.query_results(t0, t1, nodes)})
        else:
            self._send_json(404, {"status": "rejected", "diagnostic": "no such path"})

    def log_message(self, *args):  # quiet; the harness owns stdout
        pass


class DsseHttpServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], app: DsseApp):
        super().__init__(address, _DsseHandler)
        self.app = app

    def serve_in_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, daemon=True,
                                  name="dsse-http")
        thread.start()
        return thread


# ---------------------------------------------------------------------------
# Config


@dataclass
class DsseConfig:
    listen: tuple[str, int]
    registry: dict[str, int]
    records_path: str = "records.log"
    broker_listen: tuple[str, int] | None = None
    staleness_horizon_s: float = STALENESS_HORIZON_S
    pmu_sigma: float = 1e-3
    pseudo_sigma_fraction: float = 0.3
    pseudo_sigma_floor: float = 0.03
    rules: tuple[CommandRule, ...] = ()
    model_path: str | None = None


def _parse_rule(raw: str) -> CommandRule:
    parts = raw.split()
    if len(parts) < 4:
        raise KvFormatError(
            f"rule needs 'over|under <node> <limit_pu> <vo:id|topic:t> [action]': {raw!r}"
        )
    direction, node_s, limit_s, target = parts[:4]
    if direction not in ("over", "under"):
        raise KvFormatError(f"rule direction must be over|under: {raw!r}")
    if not (target.startswith("vo:") or target.startswith("topic:")):
        raise KvFormatError(f"rule target must be vo:<id> or topic:<t>: {raw!r}")
    return CommandRule(
        node=int(node_s),
        limit_pu=float(limit_s),
        target=target,
        action=parts[4] if len(parts) > 4 else "alert",
        direction=direction,
    )


def dsse_config_from_kv(doc: KvDocument, environ=None) -> DsseConfig:
    if doc.doctype != "dsse":
        raise KvFormatError(f"expected gridmesh/dsse, got gridmesh/{doc.doctype}")
    doc = apply_env_overrides(doc, environ)

    def hostport(key, required=False):
        raw = doc.get(key)
        if not raw:
            if required:
                raise KvFormatError(f"dsse: missing required key '{key}'")
            return None
        host, _, port = raw.rpartition(":")
        if not host or not port.isdigit():
            raise KvFormatError(f"dsse: {key} must be host:port, got {raw!r}")
        return (host, int(port))

    registry = {}
    for raw in doc.get_all("vo"):
        parts = raw.split()
        if len(parts) != 2:
            raise KvFormatError(f"dsse: vo entry needs '<vo_id> <node>': {raw!r}")
        registry[parts[0]] = int(parts[1])
    if not registry:
        raise KvFormatError("dsse: at least one vo registration required")

    return DsseConfig(
        listen=hostport("listen", required=True),
        registry=registry,
        records_path=doc.get("records", "records.log"),
        broker_listen=hostport("broker"),
        staleness_horizon_s=doc.get_float("staleness_horizon_s", STALENESS_HORIZON_S),
        pmu_sigma=doc.get_float("pmu_sigma", 1e-3),
        pseudo_sigma_fraction=doc.get_float("pseudo_sigma_fraction", 0.3),
        pseudo_sigma_floor=doc.get_float("pseudo_sigma_floor", 0.03),
        rules=tuple(_parse_rule(r) for r in doc.get_all("rule")),
        model_path=doc.get("model"),
    )


def load_dsse_config(path, environ=None) -> DsseConfig:
    return dsse_config_from_kv(load_kv(path, "dsse"), environ)
