"""Synchrophasor data-frame codec.

Implements the minimal data-frame subset the emulated PMUs emit. Layout
(big-endian throughout, ``n`` = phasor count):

    offset   size  field
    ------   ----  ------------------------------------------------------
    0        2     SYNC       0xAA01 (data frame)
    2        2     FRAMESIZE  total frame length in bytes
    4        2     IDCODE     data stream id
    6        4     SOC        whole seconds of the timestamp
    10       4     FRACSEC    fraction-of-second ticks (1 MHz time base)
    14       2     STAT       status bitfield
    16       8*n   PHASORS    one (re, im) float32 pair per phasor
    16+8n    4     FREQ       float32, Hz
    20+8n    4     DFREQ      float32, Hz/s (ROCOF)
    24+8n    2     CHK        CRC-CCITT (poly 0x1021, init 0xFFFF) over
                              all preceding bytes

Total length is ``26 + 8*n`` bytes (see :func:`frame_size`).

Phasors live in the domain as polar values (magnitude, angle) but travel
rectangular on the wire as float32 pairs, so a frame built from arbitrary
float64 values is not bit-identical after one encode/decode pass. Use
:meth:`PmuDataFrame.canonical` to project a frame onto the wire-exact
value grid; canonical frames round-trip losslessly.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace

SYNC_WORD = 0xAA01
TIME_BASE = 1_000_000  # fraction-of-second ticks per second (microseconds)
HEADER_BYTES = 16
PHASOR_BYTES = 8
TAIL_BYTES = 10  # FREQ + DFREQ + CHK
MAX_PHASORS = 64

# STAT bit assignments (bit 15 is the MSB of the 16-bit word).
STAT_DATA_INVALID = 0x8000
STAT_TIME_QUALITY_FAULT = 0x4000


class WireError(Exception):
    """Base class for codec failures."""


class FrameEncodeError(WireError):
    """Frame violates an encoding precondition (range, finiteness, count)."""


class FrameDecodeError(WireError):
    """Byte sequence is not a well-formed data frame."""


class TruncatedFrameError(FrameDecodeError):
    """Input shorter than the frame it claims (or must) contain."""


class BadSyncError(FrameDecodeError):
    """Leading sync word is not 0xAA01."""


class CrcMismatchError(FrameDecodeError):
    """Checksum does not match; the frame must be dropped and counted."""


def _make_crc_table(poly: int = 0x1021) -> tuple[int, ...]:
    table = []
    for byte in range(256):
        crc = byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ poly) if crc & 0x8000 else (crc << 1)
        table.append(crc & 0xFFFF)
    return tuple(table)


_CRC_TABLE = _make_crc_table()


def crc_ccitt(data: bytes, init: int = 0xFFFF) -> int:
    """CRC-CCITT (0x1021, init 0xFFFF, no reflection, no final xor)."""
    crc = init
    for byte in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[((crc >> 8) ^ byte) & 0xFF]
    return crc


def frame_size(n_phasors: int) -> int:
    """Byte length of a data frame carrying ``n_phasors`` phasors."""
    if n_phasors < 0:
        raise ValueError("phasor count must be >= 0")
    return HEADER_BYTES + PHASOR_BYTES * n_phasors + TAIL_BYTES


def normalize_angle(angle: float) -> float:
    """Map an angle in radians onto (-pi, pi]."""
    a = math.remainder(angle, math.tau)
    if a <= -math.pi:
        a = math.pi
    return a


def _f32(value: float) -> float:
    """Round a float to the nearest float32-representable value."""
    return struct.unpack(">f", struct.pack(">f", value))[0]


@dataclass(frozen=True, order=True)
class GpsTimestamp:
    """Measurement timestamp: whole seconds plus fraction-of-second ticks.

    Ordering is lexicographic on (soc, frac); time_base is excluded from
    comparisons and must agree between compared timestamps.
    """

    soc: int
    frac: int = 0
    time_base: int = field(default=TIME_BASE, compare=False)

    def __post_init__(self):
        if self.time_base <= 0:
            raise ValueError("time_base must be positive")
        if not 0 <= self.frac < self.time_base:
            raise ValueError(f"frac {self.frac} outside [0, {self.time_base})")
        if self.soc < 0:
            raise ValueError("soc must be non-negative")

    def seconds(self) -> float:
        return self.soc + self.frac / self.time_base

    def __str__(self) -> str:
        return f"{self.soc}.{self.frac:06d}"


@dataclass(frozen=True)
class Phasor:
    """Polar phasor: RMS magnitude and angle in (-pi, pi]."""

    magnitude: float
    angle: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.magnitude) and math.isfinite(self.angle)):
            raise ValueError("phasor fields must be finite")
        if self.magnitude < 0:
            raise ValueError("magnitude must be >= 0")
        object.__setattr__(self, "angle", normalize_angle(self.angle))

    @classmethod
    def from_rect(cls, re: float, im: float) -> "Phasor":
        return cls(math.hypot(re, im), math.atan2(im, re))

    @classmethod
    def from_complex(cls, value: complex) -> "Phasor":
        return cls.from_rect(value.real, value.imag)

    def rect(self) -> tuple[float, float]:
        return (self.magnitude * math.cos(self.angle),
                self.magnitude * math.sin(self.angle))

    def to_complex(self) -> complex:
        re, im = self.rect()
        return complex(re, im)

    def canonical(self) -> "Phasor":
        """Project onto the wire-exact grid (rectangular float32 pair)."""
        re, im = self.rect()
        return Phasor.from_rect(_f32(re), _f32(im))


@dataclass(frozen=True)
class PmuDataFrame:
    """One timestamped synchrophasor wire frame.

    The checksum is not stored; it is recomputed on encode and exposed via
    :attr:`crc` for inspection.
    """

    idcode: int
    timestamp: GpsTimestamp
    phasors: tuple[Phasor, ...]
    freq: float = 50.0
    rocof: float = 0.0
    status: int = 0

    def __post_init__(self):
        object.__setattr__(self, "phasors", tuple(self.phasors))

    @property
    def crc(self) -> int:
        return crc_ccitt(encode_frame(self)[:-2])

    def canonical(self) -> "PmuDataFrame":
        return replace(
            self,
            phasors=tuple(p.canonical() for p in self.phasors),
            freq=_f32(self.freq),
            rocof=_f32(self.rocof),
        )

    def vrms(self) -> float:
        """Magnitude of the first phasor (the policy's monitored quantity)."""
        if not self.phasors:
            raise ValueError("frame has no phasors")
        return self.phasors[0].magnitude


def encode_frame(frame: PmuDataFrame) -> bytes:
    """Serialize a frame, appending a valid CRC.

    Raises FrameEncodeError on phasor-count overflow, out-of-range integer
    fields, or non-finite / non-float32-representable values.
    """
    n = len(frame.phasors)
    if n > MAX_PHASORS:
        raise FrameEncodeError(f"phasor count {n} exceeds {MAX_PHASORS}")
    ts = frame.timestamp
    if ts.time_base != TIME_BASE:
        raise FrameEncodeError(f"wire time base is fixed at {TIME_BASE}")
    if not 0 <= frame.idcode <= 0xFFFF:
        raise FrameEncodeError("idcode outside uint16 range")
    if not 0 <= frame.status <= 0xFFFF:
        raise FrameEncodeError("status outside uint16 range")
    if not 0 <= ts.soc <= 0xFFFFFFFF:
        raise FrameEncodeError("soc outside uint32 range")
    if not (math.isfinite(frame.freq) and math.isfinite(frame.rocof)):
        raise FrameEncodeError("freq/rocof must be finite")

    out = bytearray(struct.pack(
        ">HHHIIH", SYNC_WORD, frame_size(n), frame.idcode,
        ts.soc, ts.frac, frame.status,
    ))
    try:
        for ph in frame.phasors:
            out += struct.pack(">ff", *ph.rect())
        out += struct.pack(">ff", frame.freq, frame.rocof)
    except (OverflowError, struct.error) as exc:
        raise FrameEncodeError(f"value not representable as float32: {exc}") from exc
    out += struct.pack(">H", crc_ccitt(bytes(out)))
    return bytes(out)


def decode_frame(data: bytes) -> PmuDataFrame:
    """Parse one complete frame; total over arbitrary byte input.

    Raises TruncatedFrameError, BadSyncError, CrcMismatchError, or a plain
    FrameDecodeError (malformed sizes, reserved values, non-finite floats).
    Never raises anything outside the FrameDecodeError hierarchy.
    """
    if len(data) < 4:
        raise TruncatedFrameError(f"need at least 4 bytes, got {len(data)}")
    sync, claimed = struct.unpack(">HH", data[:4])
    if sync != SYNC_WORD:
        raise BadSyncError(f"sync word 0x{sync:04X} != 0x{SYNC_WORD:04X}")
    if len(data) < claimed:
        raise TruncatedFrameError(f"frame claims {claimed} bytes, got {len(data)}")
    if len(data) > claimed:
        raise FrameDecodeError(f"{len(data) - claimed} trailing bytes after frame")
    if claimed < frame_size(0) or (claimed - frame_size(0)) % PHASOR_BYTES != 0:
        raise FrameDecodeError(f"frame size {claimed} does not match layout")

    expected = struct.unpack(">H", data[-2:])[0]
    actual = crc_ccitt(data[:-2])
    if expected != actual:
        raise CrcMismatchError(f"crc 0x{expected:04X} != computed 0x{actual:04X}")

    _, _, idcode, soc, frac, status = struct.unpack(">HHHIIH", data[:HEADER_BYTES])
    if frac >= TIME_BASE:
        raise FrameDecodeError(f"fracsec {frac} >= time base {TIME_BASE}")

    n = (claimed - frame_size(0)) // PHASOR_BYTES
    values = struct.unpack(f">{2 * n + 2}f", data[HEADER_BYTES:-2])
    if not all(math.isfinite(v) for v in values):
        raise FrameDecodeError("non-finite float field")
    phasors = tuple(
        Phasor.from_rect(values[2 * i], values[2 * i + 1]) for i in range(n)
    )
    return PmuDataFrame(
        idcode=idcode,
        timestamp=GpsTimestamp(soc, frac),
        phasors=phasors,
        freq=values[-2],
        rocof=values[-1],
        status=status,
    )
