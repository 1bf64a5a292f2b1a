"""PMU emulator: replays ground-truth series as 50 fps frame streams.

The stream rate is pinned to the 20 ms grid (a physical PMU's sampling
rate cannot be changed at runtime); rate adaptation happens downstream in
the VO. Frame generation is pure and seeded, so a run on a virtual clock
produces byte-identical frames to a real-time run.
"""

from __future__ import annotations

import random
import socket
import time
from dataclasses import dataclass
from typing import Callable, Iterator

from .grid import TruthSeries
from .kv import KvDocument, KvFormatError, apply_env_overrides, load_kv
from .wire import GpsTimestamp, Phasor, PmuDataFrame, encode_frame

SAMPLE_PERIOD_S = 0.02

# Commercial-PMU steady-state accuracy scale.
DEFAULT_SIGMA_MAG = 2e-4
DEFAULT_SIGMA_ANG = 1e-4


@dataclass
class PmuConfig:
    idcode: int
    node: int
    endpoint: tuple[str, int] | None = None
    sigma_mag: float = DEFAULT_SIGMA_MAG
    sigma_ang: float = DEFAULT_SIGMA_ANG
    seed: int = 0
    sample_period_s: float = SAMPLE_PERIOD_S

    def __post_init__(self):
        if self.sample_period_s != SAMPLE_PERIOD_S:
            raise KvFormatError("pmu: sample period is fixed at 0.02 s")
        if self.sigma_mag < 0 or self.sigma_ang < 0:
            raise KvFormatError("pmu: noise sigmas must be >= 0")

    def channel_name(self) -> str:
        return f"V{self.node}"


def pmu_config_from_kv(doc: KvDocument, environ=None) -> PmuConfig:
    if doc.doctype != "pmu":
        raise KvFormatError(f"expected gridmesh/pmu, got gridmesh/{doc.doctype}")
    doc = apply_env_overrides(doc, environ)
    endpoint = None
    raw = doc.get("endpoint")
    if raw:
        host, _, port = raw.rpartition(":")
        if not host or not port.isdigit():
            raise KvFormatError(f"pmu: endpoint must be host:port, got {raw!r}")
        endpoint = (host, int(port))
    return PmuConfig(
        idcode=doc.get_int("idcode"),
        node=doc.get_int("node"),
        endpoint=endpoint,
        sigma_mag=doc.get_float("sigma_mag", DEFAULT_SIGMA_MAG),
        sigma_ang=doc.get_float("sigma_ang", DEFAULT_SIGMA_ANG),
        seed=doc.get_int("seed", 0),
        sample_period_s=doc.get_float("sample_period_s", SAMPLE_PERIOD_S),
    )


def load_pmu_config(path, environ=None) -> PmuConfig:
    return pmu_config_from_kv(load_kv(path, "pmu"), environ)


def apply_noise(phasor: Phasor, sigma_mag: float, sigma_ang: float,
                rng: random.Random) -> Phasor:
    """Multiplicative magnitude noise, additive angle noise.

    Draws two variates even when a sigma is zero so the rng stream (and
    therefore the frame sequence) does not depend on which sigmas are set.
    """
    dmag = rng.gauss(0.0, 1.0)
    dang = rng.gauss(0.0, 1.0)
    if sigma_mag == 0 and sigma_ang == 0:
        return phasor
    return Phasor(
        max(0.0, phasor.magnitude * (1.0 + sigma_mag * dmag)),
        phasor.angle + sigma_ang * dang,
    )


def frames(config: PmuConfig, truth: TruthSeries) -> Iterator[PmuDataFrame]:
    """Frame per tick, timestamped from truth (no re-stamping), noise added."""
    if config.node not in truth.voltages:
        raise KeyError(f"node {config.node} not present in the truth series")
    rng = random.Random(config.seed)
    for tick in range(len(truth)):
        ts, phasor, freq, rocof = truth.sample(config.node, tick)
        noisy = apply_noise(phasor, config.sigma_mag, config.sigma_ang, rng)
        yield PmuDataFrame(
            idcode=config.idcode,
            timestamp=ts,
            phasors=(noisy,),
            freq=freq,
            rocof=rocof,
        )


@dataclass
class StreamStats:
    frames_sent: int = 0
    frames_dropped: int = 0
    bytes_sent: int = 0

    @property
    def frames_total(self) -> int:
        return self.frames_sent + self.frames_dropped


def stream(
    config: PmuConfig,
    truth: TruthSeries,
    clock,
    sink: Callable[[bytes], None],
    retries: int = 3,
    backoff_s: float = 0.05,
) -> StreamStats:
    """Pace the frame sequence through ``clock`` into ``sink``.

    A sink failure is retried up to ``retries`` times with linear backoff;
    after that the frame is dropped and counted, and streaming continues.
    """
    stats = StreamStats()
    start = truth.timestamps[0].seconds() if len(truth) else 0.0
    for frame in frames(config, truth):
        clock.sleep_until(frame.timestamp.seconds() - start)
        data = encode_frame(frame)
        for attempt in range(retries + 1):
            try:
                sink(data)
                stats.frames_sent += 1
                stats.bytes_sent += len(data)
                break
            except OSError:
                if attempt == retries:
                    stats.frames_dropped += 1
                else:
                    clock.sleep(backoff_s * (attempt + 1))
    return stats


class TcpFrameSink:
    """Reconnecting TCP sink; one frame per send."""

    def __init__(self, endpoint: tuple[str, int], connect_timeout: float = 2.0):
        self.endpoint = endpoint
        self.connect_timeout = connect_timeout
        self._sock: socket.socket | None = None

    def __call__(self, data: bytes) -> None:
        if self._sock is None:
            self._sock = socket.create_connection(
                self.endpoint, timeout=self.connect_timeout
            )
        try:
            self._sock.sendall(data)
        except OSError:
            self.close()
            raise

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


def connect_and_stream(config: PmuConfig, truth: TruthSeries, clock,
                       connect_retries: int = 20) -> StreamStats:
    """CLI entry: connect to the paired VO (retrying) and stream the series."""
    if config.endpoint is None:
        raise KvFormatError("pmu: no endpoint configured")
    sink = TcpFrameSink(config.endpoint)
    for attempt in range(connect_retries):
        try:
            sink(b"")  # force connect
            break
        except OSError:
            if attempt == connect_retries - 1:
                raise
            time.sleep(0.1)
    try:
        return stream(config, truth, clock, sink)
    finally:
        sink.close()
