"""Deterministic discrete-event kernel.

Single-threaded dispatch over a (time, seq) priority queue. Time is integer
milliseconds since scenario start. Every dispatched event is appended to a
replayable trace whose records hash the event payload, so two runs of the
same scenario and seed produce byte-identical trace files.
"""

from __future__ import annotations

import hashlib
import heapq
import json
import random
from dataclasses import dataclass, field
from enum import Enum

from .errors import SchedulingInPast


class EventKind(Enum):
    REQUEST_ARRIVAL = "RequestArrival"
    REQUEST_COMPLETE = "RequestComplete"
    JOB_SUBMIT = "JobSubmit"
    JOB_START = "JobStart"
    JOB_END = "JobEnd"
    NODE_TRANSITION_STEP = "NodeTransitionStep"
    SCALE_POLL_TICK = "ScalePollTick"
    RECONCILE_TICK = "ReconcileTick"
    MAINTENANCE_START = "MaintenanceStart"
    MAINTENANCE_END = "MaintenanceEnd"


@dataclass(frozen=True)
class Event:
    time: int
    seq: int
    kind: EventKind
    payload: dict


@dataclass(frozen=True)
class TraceRecord:
    time: int
    seq: int
    kind: str
    digest: str

    def line(self) -> str:
        return f"{self.time}\t{self.seq}\t{self.kind}\t{self.digest}"


def payload_digest(payload: dict) -> str:
    """Stable 64-bit hash of a JSON-able payload."""
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(blob.encode("utf-8"), digest_size=8).hexdigest()


def derive_seed(seed: int, label: str) -> int:
    """Stable per-label sub-seed, independent of PYTHONHASHSEED."""
    blob = f"{seed}\x1f{label}".encode("utf-8")
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "big")


@dataclass
class Engine:
    """Event queue, clock, trace, and seeded randomness for one scenario run."""

    seed: int = 0
    clock: int = 0
    _seq: int = field(default=0, repr=False)
    _heap: list = field(default_factory=list, repr=False)
    _cancelled: set = field(default_factory=set, repr=False)
    _handlers: dict = field(default_factory=dict, repr=False)
    trace: list = field(default_factory=list, repr=False)

    def on(self, kind: EventKind, handler) -> None:
        self._handlers.setdefault(kind, []).append(handler)

    def schedule(self, time: int, kind: EventKind, payload: dict | None = None) -> int:
        """Enqueue an event; returns its seq (usable as a cancellation handle)."""
        if time < self.clock:
            raise SchedulingInPast(
                f"cannot schedule {kind.value} at t={time} (clock={self.clock})"
            )
        seq = self._seq
        self._seq += 1
        event = Event(time=time, seq=seq, kind=kind, payload=payload or {})
        heapq.heappush(self._heap, (time, seq, event))
        return seq

    def cancel(self, seq: int) -> None:
        self._cancelled.add(seq)

    def pending(self) -> int:
        """Number of not-yet-dispatched, not-cancelled events."""
        return sum(1 for _, s, _e in self._heap if s not in self._cancelled)

    def next_time(self) -> int | None:
        """Earliest pending event time, or None when the queue is drained."""
        while self._heap and self._heap[0][1] in self._cancelled:
            _, seq, _ = heapq.heappop(self._heap)
            self._cancelled.discard(seq)
        return self._heap[0][0] if self._heap else None

    def run_until(self, t: int) -> list[TraceRecord]:
        """Dispatch everything with time <= t in (time, seq) order; clock ends at t."""
        if t < self.clock:
            raise SchedulingInPast(f"cannot run to t={t} (clock={self.clock})")
        segment: list[TraceRecord] = []
        while self._heap and self._heap[0][0] <= t:
            _, seq, event = heapq.heappop(self._heap)
            if seq in self._cancelled:
                self._cancelled.discard(seq)
                continue
            self.clock = event.time
            record = TraceRecord(
                time=event.time,
                seq=event.seq,
                kind=event.kind.value,
                digest=payload_digest(event.payload),
            )
            self.trace.append(record)
            segment.append(record)
            for handler in self._handlers.get(event.kind, ()):
                handler(event)
        self.clock = t
        return segment

    def rng_stream(self, label: str) -> random.Random:
        """Fresh deterministic generator for (seed, label); same pair, same draws."""
        return random.Random(derive_seed(self.seed, label))


def export_trace(records, path) -> None:
    """One tab-separated record per line: time, seq, kind, digest."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.line() + "\n")
