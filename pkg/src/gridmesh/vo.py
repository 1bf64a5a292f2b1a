"""Edge Virtual Object: rate policy, report filtering, and serving.

The VO terminates one PMU's frame stream and decides, per frame, whether
to forward it northbound. The adaptive reporting-rate state machine:

* escalation: if the RMS voltage (first phasor magnitude) moves by more
  than ``raise_threshold`` relative to the previous *input* frame, the
  rate jumps straight to the top of the ladder, effective on that frame;
* subsampling: a frame is emitted iff its fraction-of-second is an exact
  multiple of ``time_base / current_rr``, so emissions from VOs running
  at common rates coincide on the timestamp grid;
* step-down: when the whole-seconds field first exceeds the last
  evaluated boundary, and the voltage moved by less than
  ``lower_threshold`` relative to the previous *output* frame, the rate
  drops one ladder step (at most one step per boundary).

The first frame ever seen primes both reference values and is emitted.
Relative comparisons are skipped when the reference magnitude is below
1e-9 pu. Out-of-order or duplicate timestamps are dropped before the
policy sees them.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field, replace

from .kv import KvDocument, KvFormatError, apply_env_overrides, load_kv
from .wire import (
    FrameDecodeError,
    GpsTimestamp,
    Phasor,
    PmuDataFrame,
    decode_frame,
)

NEAR_ZERO_PU = 1e-9

ALL_FIELDS = ("phasors", "freq", "rocof", "status")


@dataclass(frozen=True)
class FilterSpec:
    """Field selection for northbound reports; phasors are always kept."""

    include: frozenset[str] = frozenset(ALL_FIELDS)

    def __post_init__(self):
        unknown = self.include - set(ALL_FIELDS)
        if unknown:
            raise ValueError(f"unknown report fields: {sorted(unknown)}")
        object.__setattr__(self, "include", self.include | {"phasors"})

    @classmethod
    def full(cls) -> "FilterSpec":
        return cls(frozenset(ALL_FIELDS))

    @classmethod
    def phasors_only(cls) -> "FilterSpec":
        return cls(frozenset({"phasors"}))

    @classmethod
    def parse(cls, text: str) -> "FilterSpec":
        names = [f for f in text.replace(",", " ").split() if f]
        return cls(frozenset(names))


@dataclass
class VoReport:
    """Key-value report abstracted from the PMU wire format."""

    vo_id: str
    timestamp: GpsTimestamp
    phasors: dict[str, Phasor]
    rr: int
    freq: float | None = None
    rocof: float | None = None
    status: int | None = None

    def to_dict(self) -> dict:
        doc = {
            "vo_id": self.vo_id,
            "ts": {"soc": self.timestamp.soc, "frac": self.timestamp.frac},
            "phasors": {
                name: {"mag": ph.magnitude, "ang": ph.angle}
                for name, ph in self.phasors.items()
            },
            "rr": self.rr,
        }
        if self.freq is not None:
            doc["freq"] = self.freq
        if self.rocof is not None:
            doc["rocof"] = self.rocof
        if self.status is not None:
            doc["status"] = self.status
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "VoReport":
        try:
            phasors = {
                name: Phasor(entry["mag"], entry["ang"])
                for name, entry in doc["phasors"].items()
            }
            return cls(
                vo_id=doc["vo_id"],
                timestamp=GpsTimestamp(doc["ts"]["soc"], doc["ts"]["frac"]),
                phasors=phasors,
                rr=int(doc["rr"]),
                freq=doc.get("freq"),
                rocof=doc.get("rocof"),
                status=doc.get("status"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed report document: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "VoReport":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"report is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValueError("report must be a JSON object")
        return cls.from_dict(doc)


def filter_report(frame: PmuDataFrame, spec: FilterSpec, vo_id: str,
                  channel_names: list[str], rr: int) -> VoReport:
    """Project a frame onto the report schema, keeping only ``spec`` fields."""
    if len(channel_names) != len(frame.phasors):
        raise ValueError(
            f"{len(channel_names)} channel names for {len(frame.phasors)} phasors"
        )
    return VoReport(
        vo_id=vo_id,
        timestamp=frame.timestamp,
        phasors=dict(zip(channel_names, frame.phasors)),
        rr=rr,
        freq=frame.freq if "freq" in spec.include else None,
        rocof=frame.rocof if "rocof" in spec.include else None,
        status=frame.status if "status" in spec.include else None,
    )


@dataclass
class RatePolicyState:
    current_rr: int = 1
    last_input_vrms: float | None = None
    last_output_vrms: float | None = None
    last_second_boundary: int | None = None
    raise_threshold: float = 0.02
    lower_threshold: float = 0.001
    rr_ladder: tuple[int, ...] = (1, 10, 25, 50)

    def __post_init__(self):
        if not self.rr_ladder or tuple(sorted(self.rr_ladder)) != self.rr_ladder:
            raise ValueError("rr_ladder must be sorted ascending and non-empty")
        if not 0 < self.lower_threshold < self.raise_threshold:
            raise ValueError("need raise_threshold > lower_threshold > 0")
        top = self.rr_ladder[-1]
        for r in self.rr_ladder:
            if r <= 0 or top % r != 0:
                raise ValueError(f"ladder rate {r} does not divide the top rate {top}")
        if self.current_rr not in self.rr_ladder:
            raise ValueError(f"current_rr {self.current_rr} not on the ladder")


@dataclass(frozen=True)
class PolicyDecision:
    emit: bool
    rr: int
    escalated: bool = False
    stepped_down: bool = False
    transitions: tuple[tuple[int, int], ...] = ()


def on_input_frame(state: RatePolicyState,
                   frame: PmuDataFrame) -> tuple[RatePolicyState, PolicyDecision]:
    """Advance the rate state machine by one in-order frame.

    Pure: returns the successor state and the emit decision. Evaluation
    order is escalation, emission, step-down, reference update.
    """
    v = frame.vrms()
    ts = frame.timestamp

    if state.last_input_vrms is None:
        new = replace(state, last_input_vrms=v, last_output_vrms=v,
                      last_second_boundary=ts.soc)
        return new, PolicyDecision(emit=True, rr=new.current_rr)

    rr = state.current_rr
    transitions: list[tuple[int, int]] = []

    escalated = False
    top = state.rr_ladder[-1]
    if state.last_input_vrms > NEAR_ZERO_PU:
        if abs(v - state.last_input_vrms) / state.last_input_vrms > state.raise_threshold:
            if rr != top:
                transitions.append((rr, top))
                escalated = True
            rr = top

    emit = ts.frac % (ts.time_base // rr) == 0

    stepped_down = False
    boundary = state.last_second_boundary
    if boundary is None or ts.soc > boundary:
        if (state.last_output_vrms is not None
                and state.last_output_vrms > NEAR_ZERO_PU
                and abs(v - state.last_output_vrms) / state.last_output_vrms
                < state.lower_threshold):
            idx = state.rr_ladder.index(rr)
            if idx > 0:
                transitions.append((rr, state.rr_ladder[idx - 1]))
                rr = state.rr_ladder[idx - 1]
                stepped_down = True
        boundary = ts.soc

    new = replace(
        state,
        current_rr=rr,
        last_input_vrms=v,
        last_output_vrms=v if emit else state.last_output_vrms,
        last_second_boundary=boundary,
    )
    return new, PolicyDecision(emit=emit, rr=rr, escalated=escalated,
                               stepped_down=stepped_down,
                               transitions=tuple(transitions))


@dataclass
class VoCounters:
    frames_received: int = 0
    frames_emitted: int = 0
    crc_dropped: int = 0
    decode_dropped: int = 0
    order_dropped: int = 0
    reports_delivered: int = 0
    reports_lost: int = 0


class VoCore:
    """Policy + filtering around one PMU stream; transport-agnostic.

    ``fixed_rr`` pins the output rate (every frame forwarded, policy
    bypassed), which is the fixed-50 comparison mode.
    """

    def __init__(self, vo_id: str, node: int,
                 filter_spec: FilterSpec | None = None,
                 policy: RatePolicyState | None = None,
                 fixed_rr: int | None = None,
                 channel_names: list[str] | None = None):
        self.vo_id = vo_id
        self.node = node
        self.filter_spec = filter_spec or FilterSpec.full()
        self.state = policy or RatePolicyState()
        self.fixed_rr = fixed_rr
        self.channel_names = channel_names or [f"V{node}"]
        self.counters = VoCounters()
        self.rate_trace: list[tuple[float, int, int]] = []  # (t_s, old, new)
        self._last_ts: GpsTimestamp | None = None
        self._latest: tuple[PmuDataFrame, int] | None = None
        self._lock = threading.Lock()

    def ingest_bytes(self, data: bytes) -> VoReport | None:
        from .wire import CrcMismatchError
        try:
            frame = decode_frame(data)
        except CrcMismatchError:
            self.counters.crc_dropped += 1
            return None
        except FrameDecodeError:
            self.counters.decode_dropped += 1
            return None
        return self.ingest_frame(frame)

    def ingest_frame(self, frame: PmuDataFrame) -> VoReport | None:
        self.counters.frames_received += 1
        if self._last_ts is not None and frame.timestamp <= self._last_ts:
            self.counters.order_dropped += 1
            return None
        self._last_ts = frame.timestamp

        if self.fixed_rr is not None:
            emit, rr = True, self.fixed_rr
        else:
            self.state, decision = on_input_frame(self.state, frame)
            emit, rr = decision.emit, decision.rr
            t = frame.timestamp.seconds()
            for old, new in decision.transitions:
                self.rate_trace.append((t, old, new))
        if not emit:
            return None

        self.counters.frames_emitted += 1
        with self._lock:
            self._latest = (frame, rr)
        return filter_report(frame, self.filter_spec, self.vo_id,
                             self.channel_names, rr)

    def latest_report(self, spec: FilterSpec | None = None) -> VoReport | None:
        with self._lock:
            snapshot = self._latest
        if snapshot is None:
            return None
        frame, rr = snapshot
        return filter_report(frame, spec or self.filter_spec, self.vo_id,
                             self.channel_names, rr)


@dataclass
class VoConfig:
    vo_id: str
    node: int
    listen: tuple[str, int] | None = None       # PMU frame ingest
    http: tuple[str, int] | None = None         # GET /latest
    endpoint: str | None = None                 # DSSE POST URL
    raise_threshold: float = 0.02
    lower_threshold: float = 0.001
    rr_ladder: tuple[int, ...] = (1, 10, 25, 50)
    filter_spec: FilterSpec = field(default_factory=FilterSpec.full)
    fixed_rr: int | None = None

    def make_core(self) -> VoCore:
        policy = RatePolicyState(
            current_rr=self.rr_ladder[0],
            raise_threshold=self.raise_threshold,
            lower_threshold=self.lower_threshold,
            rr_ladder=self.rr_ladder,
        )
        return VoCore(self.vo_id, self.node, self.filter_spec, policy,
                      fixed_rr=self.fixed_rr)


def _parse_hostport(doc: KvDocument, key: str) -> tuple[str, int] | None:
    raw = doc.get(key)
    if not raw:
        return None
    host, _, port = raw.rpartition(":")
    if not host or not port.isdigit():
        raise KvFormatError(f"vo: {key} must be host:port, got {raw!r}")
    return (host, int(port))


def vo_config_from_kv(doc: KvDocument, environ=None) -> VoConfig:
    if doc.doctype != "vo":
        raise KvFormatError(f"expected gridmesh/vo, got gridmesh/{doc.doctype}")
    doc = apply_env_overrides(doc, environ)
    ladder_raw = doc.get("ladder", "1 10 25 50")
    try:
        ladder = tuple(int(r) for r in ladder_raw.split())
    except ValueError as exc:
        raise KvFormatError(f"vo: bad ladder {ladder_raw!r}") from exc
    fixed = doc.get("fixed_rr")
    return VoConfig(
        vo_id=doc.require("vo_id"),
        node=doc.get_int("node"),
        listen=_parse_hostport(doc, "listen"),
        http=_parse_hostport(doc, "http"),
        endpoint=doc.get("endpoint"),
        raise_threshold=doc.get_float("raise_threshold", 0.02),
        lower_threshold=doc.get_float("lower_threshold", 0.001),
        rr_ladder=ladder,
        filter_spec=FilterSpec.parse(doc.get("fields", "phasors freq rocof status")),
        fixed_rr=int(fixed) if fixed else None,
    )


def load_vo_config(path, environ=None) -> VoConfig:
    return vo_config_from_kv(load_kv(path, "vo"), environ)
