"""Deterministic discrete-event engine.

Time is an integer count of nanoseconds. Events fire in ``(fire_at, seq)``
order where ``seq`` is assigned at scheduling time, so two events at the same
instant run in the order they were scheduled.
"""

from __future__ import annotations

import enum
import random
from dataclasses import dataclass, field
from heapq import heappop, heappush
from typing import Any, Callable

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

_MASK64 = (1 << 64) - 1


class SimulationError(RuntimeError):
    """Fatal logic error inside a run (the run must abort)."""


class InvariantViolation(SimulationError):
    """A checked model invariant did not hold."""


class EventKind(enum.IntEnum):
    PACKET_ARRIVAL = 0
    PACKET_DEQUEUE = 1
    TIMER_EXPIRY = 2
    FLOW_ARRIVAL = 3
    METRIC_SAMPLE = 4


@dataclass
class Event:
    fire_at: int
    kind: EventKind
    handler: Callable[[Any], None]
    payload: Any = None
    seq: int = -1


@dataclass
class RunStats:
    processed: dict[str, int] = field(default_factory=dict)
    scheduled: int = 0
    queued: int = 0
    end_time: int = 0

    @property
    def total(self) -> int:
        return sum(self.processed.values())


def mix64(*values: int) -> int:
    """SplitMix64-style fold of integers; stable across platforms."""
    h = 0x9E3779B97F4A7C15
    for v in values:
        h = (h ^ (v & _MASK64)) & _MASK64
        h = (h + 0x9E3779B97F4A7C15) & _MASK64
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h


class SeededRng(random.Random):
    """One independent pseudo-random stream per consumer.

    The Mersenne Twister state is derived from ``(seed, stream_id)`` only,
    so adding a consumer never shifts another consumer's draws.
    """

    def __new__(cls, seed: int, stream_id: int):
        return super().__new__(cls)

    def __init__(self, seed: int, stream_id: int):
        self.seed_value = seed
        self.stream_id = stream_id
        super().__init__(mix64(seed, stream_id))


class Stream(enum.IntEnum):
    WORKLOAD = 1
    ECMP_SALT = 2
    DRILL = 3
    MARKING = 4
    LETFLOW = 5
    SCENARIO = 6


class Simulator:
    """Single-threaded event loop owning the virtual clock."""

    def __init__(self, seed: int = 0):
        self.now = 0
        self.seed = seed
        self._heap: list = []
        self._seq = 0
        self._counts = [0] * len(EventKind)
        self._rngs: dict[int, SeededRng] = {}

    def rng(self, stream: int) -> SeededRng:
        r = self._rngs.get(stream)
        if r is None:
            r = self._rngs[stream] = SeededRng(self.seed, int(stream))
        return r

    def schedule(self, event: Event) -> Event:
        if event.fire_at < self.now:
            raise SimulationError(
                f"event scheduled in the past: {event.fire_at} < now {self.now}")
        self._seq += 1
        event.seq = self._seq
        heappush(self._heap, (event.fire_at, self._seq, int(event.kind),
                              event.handler, event.payload))
        return event

    def call_at(self, fire_at: int, kind: int, handler, payload=None) -> None:
        """Hot-path variant of :meth:`schedule` without the Event wrapper."""
        if fire_at < self.now:
            raise SimulationError(
                f"event scheduled in the past: {fire_at} < now {self.now}")
        self._seq += 1
        heappush(self._heap, (fire_at, self._seq, kind, handler, payload))

    @property
    def scheduled(self) -> int:
        return self._seq

    @property
    def pending(self) -> int:
        return len(self._heap)

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def run_until(self, horizon: int) -> RunStats:
        heap = self._heap
        counts = self._counts
        pop = heappop
        while heap and heap[0][0] <= horizon:
            fire_at, _, kind, handler, payload = pop(heap)
            self.now = fire_at
            counts[kind] += 1
            handler(payload)
        if horizon > self.now:
            self.now = horizon
        return self.stats()

    def stats(self) -> RunStats:
        return RunStats(
            processed={k.name.lower(): self._counts[k] for k in EventKind},
            scheduled=self._seq,
            queued=len(self._heap),
            end_time=self.now,
        )
