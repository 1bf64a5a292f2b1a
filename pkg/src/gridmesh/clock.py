"""Injectable clocks and the simulated WAN delay model.

Components never call ``time.sleep`` directly; they pace themselves
through a clock object so the same 30 s scenario can run in milliseconds
(virtual clock) or in real time (wall clock, for latency measurement).
"""

from __future__ import annotations

import random
import time


class VirtualClock:
    """Simulated clock: ``sleep_until`` advances instantly, never blocks."""

    def __init__(self, start: float = 0.0):
        self._now = float(start)

    def now(self) -> float:
        return self._now

    def sleep_until(self, t: float) -> None:
        if t > self._now:
            self._now = t

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            self._now += seconds

    @property
    def is_virtual(self) -> bool:
        return True


class WallClock:
    """Monotonic wall clock, optionally sped up for paced replays."""

    def __init__(self, speed: float = 1.0):
        if speed <= 0:
            raise ValueError("speed must be positive")
        self.speed = speed
        self._epoch = time.monotonic()

    def now(self) -> float:
        return (time.monotonic() - self._epoch) * self.speed

    def sleep_until(self, t: float) -> None:
        delay = (t - self.now()) / self.speed
        if delay > 0:
            time.sleep(delay)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds / self.speed)

    @property
    def is_virtual(self) -> bool:
        return False


class WanDelay:
    """Symmetric one-way delay with jitter for the vo->cloud path.

    Samples are deterministic for a given seed. ``one_way()`` returns the
    delay in seconds; callers sleep it on wall clocks and merely account it
    on virtual ones.
    """

    def __init__(self, one_way_ms: float = 40.0, jitter_ms: float = 5.0,
                 seed: int = 0):
        if one_way_ms < 0 or jitter_ms < 0:
            raise ValueError("delays must be non-negative")
        self.one_way_ms = one_way_ms
        self.jitter_ms = jitter_ms
        self._rng = random.Random(seed)

    def one_way(self) -> float:
        if self.one_way_ms == 0 and self.jitter_ms == 0:
            return 0.0
        ms = self._rng.gauss(self.one_way_ms, self.jitter_ms)
        return max(0.0, ms) / 1000.0
