"""Network front end for a Virtual Object.

Southbound, a TCP listener terminates the PMU byte stream (frames are
length-delimited by their FRAMESIZE word). Northbound, emitted reports go
through a delivery pool that POSTs to the DSSE endpoint; network stalls
back up the pool's queue, never the policy thread. A small HTTP server
answers GET ``/latest`` with the most recent report, re-filtered per the
query's ``fields`` selection.

The injected WAN delay is slept symmetrically around each POST, and the
recorded total is decomposed using the ack's estimation/persist timings,
so total = network + estimation + persist holds by construction.
"""

from __future__ import annotations

import http.client
import json
import queue
import socketserver
import struct
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlparse

from .bench import LatencyRecord
from .clock import WanDelay
from .vo import FilterSpec, VoConfig, VoCore, VoReport


@dataclass
class DeliveryStats:
    delivered: int = 0
    lost: int = 0
    commands: list[dict] = field(default_factory=list)
    latencies: list[LatencyRecord] = field(default_factory=list)


class DeliveryPool:
    """Worker pool POSTing reports; bounded retries, then count as lost."""

    def __init__(self, endpoint: str, workers: int = 8,
                 wan: WanDelay | None = None, retries: int = 2,
                 timeout_s: float = 10.0, on_command=None):
        url = urlparse(endpoint)
        if url.scheme != "http" or not url.hostname:
            raise ValueError(f"endpoint must be an http:// URL, got {endpoint!r}")
        self._host = url.hostname
        self._port = url.port or 80
        self._path = url.path or "/report"
        self._wan = wan
        self._retries = retries
        self._timeout_s = timeout_s
        self._on_command = on_command
        self._queue: "queue.Queue[VoReport | None]" = queue.Queue()
        self.stats = DeliveryStats()
        self._stats_lock = threading.Lock()
        self._threads = [
            threading.Thread(target=self._worker, daemon=True,
                             name=f"vo-delivery-{i}")
            for i in range(workers)
        ]
        for t in self._threads:
            t.start()

    def submit(self, report: VoReport) -> None:
        self._queue.put(report)

    def _post_once(self, conn: http.client.HTTPConnection, body: bytes):
        conn.request("POST", self._path, body=body,
                     headers={"Content-Type": "application/json"})
        resp = conn.getresponse()
        data = resp.read()
        return resp.status, data

    def _worker(self) -> None:
        conn = http.client.HTTPConnection(self._host, self._port,
                                          timeout=self._timeout_s)
        while True:
            report = self._queue.get()
            if report is None:
                self._queue.task_done()
                break
            body = report.to_json().encode("utf-8")
            injected = self._wan.one_way_ms if self._wan else 0.0
            t0 = time.perf_counter()
            if self._wan:
                time.sleep(self._wan.one_way())
            status, data = None, b""
            for attempt in range(self._retries + 1):
                try:
                    status, data = self._post_once(conn, body)
                    break
                except (OSError, http.client.HTTPException):
                    conn.close()
                    conn = http.client.HTTPConnection(self._host, self._port,
                                                      timeout=self._timeout_s)
                    if attempt == self._retries:
                        status = None
            if self._wan:
                time.sleep(self._wan.one_way())
            total_ms = (time.perf_counter() - t0) * 1000.0

            with self._stats_lock:
                if status is None:
                    self.stats.lost += 1
                else:
                    self.stats.delivered += 1
                    est_ms = persist_ms = 0.0
                    try:
                        ack = json.loads(data) if data else {}
                        est_ms = float(ack.get("est_ms") or 0.0)
                        persist_ms = float(ack.get("persist_ms") or 0.0)
                        command = ack.get("command")
                    except (ValueError, json.JSONDecodeError):
                        ack, command = {}, None
                    self.stats.latencies.append(LatencyRecord(
                        network_ms=max(0.0, total_ms - est_ms - persist_ms),
                        est_ms=est_ms,
                        persist_ms=persist_ms,
                        total_ms=total_ms,
                        injected_one_way_ms=injected,
                    ))
                    if command:
                        self.stats.commands.append(command)
                        if self._on_command is not None:
                            self._on_command(command)
            self._queue.task_done()

    def drain(self) -> None:
        self._queue.join()

    def close(self) -> None:
        for _ in self._threads:
            self._queue.put(None)
        for t in self._threads:
            t.join(timeout=5.0)


class _FrameIngestHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server: "VoServer" = self.server.vo_server
        sock = self.request
        fh = sock.makefile("rb")
        try:
            while True:
                head = fh.read(4)
                if len(head) < 4:
                    break
                _, framesize = struct.unpack(">HH", head)
                if framesize < 4:
                    break  # unframeable; drop the connection
                rest = fh.read(framesize - 4)
                if len(rest) < framesize - 4:
                    break
                server.on_frame_bytes(head + rest)
        finally:
            fh.close()


class _FrameIngestServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class _LatestHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"

    def do_GET(self):
        server: "VoServer" = self.server.vo_server
        url = urlparse(self.path)
        if url.path != "/latest":
            self._send(404, {"status": "no-such-path"})
            return
        params = parse_qs(url.query)
        spec = None
        if "fields" in params:
            try:
                spec = FilterSpec.parse(params["fields"][0])
            except ValueError as exc:
                self._send(400, {"status": "bad-fields", "diagnostic": str(exc)})
                return
        report = server.core.latest_report(spec)
        if report is None:
            self._send(404, {"status": "no-data"})
        else:
            self._send(200, report.to_dict())

    def _send(self, code: int, doc: dict) -> None:
        body = json.dumps(doc, separators=(",", ":")).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def log_message(self, *args):
        pass


class VoServer:
    """Wires a VoCore to its sockets: PMU ingest, GET serving, POST delivery."""

    def __init__(self, config: VoConfig, wan: WanDelay | None = None,
                 delivery_workers: int = 8, on_command=None,
                 account=None):
        self.config = config
        self.core = config.make_core()
        self.account = account          # callable(link, nbytes, ts_seconds)
        self.delivery: DeliveryPool | None = None
        if config.endpoint:
            self.delivery = DeliveryPool(config.endpoint, delivery_workers,
                                         wan, on_command=on_command)
        self._ingest_server = None
        self._http_server = None

    def on_frame_bytes(self, data: bytes) -> None:
        report = self.core.ingest_bytes(data)
        if self.account is not None:
            ts = _frame_ts_seconds(data)
            self.account(f"pmu->vo:{self.config.vo_id}", len(data), ts)
            if report is not None:
                self.account(f"vo->cloud:{self.config.vo_id}",
                             len(report.to_json().encode("utf-8")),
                             report.timestamp.seconds())
        if report is not None and self.delivery is not None:
            self.delivery.submit(report)

    def start(self) -> None:
        if self.config.listen:
            self._ingest_server = _FrameIngestServer(self.config.listen,
                                                     _FrameIngestHandler)
            self._ingest_server.vo_server = self
            threading.Thread(target=self._ingest_server.serve_forever,
                             daemon=True, name="vo-ingest").start()
        if self.config.http:
            self._http_server = ThreadingHTTPServer(self.config.http,
                                                    _LatestHandler)
            self._http_server.daemon_threads = True
            self._http_server.vo_server = self
            threading.Thread(target=self._http_server.serve_forever,
                             daemon=True, name="vo-http").start()

    @property
    def ingest_address(self) -> tuple[str, int]:
        return self._ingest_server.server_address

    @property
    def http_address(self) -> tuple[str, int]:
        return self._http_server.server_address

    def drain(self) -> None:
        if self.delivery is not None:
            self.delivery.drain()

    def stop(self) -> None:
        if self._ingest_server is not None:
            self._ingest_server.shutdown()
            self._ingest_server.server_close()
        if self._http_server is not None:
            self._http_server.shutdown()
            self._http_server.server_close()
        if self.delivery is not None:
            self.delivery.close()


def _frame_ts_seconds(data: bytes) -> float:
    if len(data) >= 14:
        _, _, _, soc, frac = struct.unpack(">HHHII", data[:14])
        return soc + frac / 1e6
    return 0.0
