"""Batch plane: FIFO queue with walltime-based backfill and path-aware runtimes.

Scheduling order is strict arrival order. When the head of the queue cannot
start, it gets a reservation at the earliest walltime-estimated instant
enough nodes free up, and later jobs may start out of order only if their
own walltime estimate ends by that reservation. The scheduler plans with
walltime estimates; actual runtimes come from the network factor table, and
a job that outlives its estimate is not killed, it just makes the earlier
backfill decision retroactively optimistic, exactly as on a real system
with conservative estimates.

Runtime model: communication-heavy jobs pay a multiplier determined by the
best network path common to every allocated node. The multipliers are exact
ratios of measured runtimes on the reference fabric, with single-lane TCP
over the high-speed network as the 1.0 baseline. Single-node jobs never pay
the multiplier, whatever their communication class.
"""

from __future__ import annotations

import math
from bisect import insort
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping

from .core import JoinedBatch, NetworkPathKind, Node, PATH_PREFERENCE
from .engine import Engine, EventKind
from .errors import InvalidJob, UnknownJob


class CommClass(Enum):
    SMALL = "small"
    LARGE = "large"


class JobState(Enum):
    QUEUED = "queued"
    RUNNING = "running"
    COMPLETED = "completed"
    CANCELLED = "cancelled"


# Exact runtime ratios relative to single-lane TCP on the high-speed network.
DEFAULT_FACTORS: Mapping[NetworkPathKind, Fraction] = {
    NetworkPathKind.MGMT_ETH: Fraction(3779, 1165),
    NetworkPathKind.HSN_TCP_SINGLE: Fraction(1),
    NetworkPathKind.HSN_TCP_MULTI: Fraction(1550, 1165),
    NetworkPathKind.HSN_RDMA: Fraction(81, 1165),
}


@dataclass(frozen=True)
class NetworkFactorTable:
    factors: Mapping[NetworkPathKind, Fraction] = field(
        default_factory=lambda: dict(DEFAULT_FACTORS)
    )

    def factor(self, path: NetworkPathKind) -> Fraction:
        return self.factors[path]


def common_path(nodes: Iterable[Node]) -> NetworkPathKind:
    """Best path present on every node; the management network always exists."""
    shared: set[NetworkPathKind] | None = None
    for node in nodes:
        kinds = {p.kind for p in node.network_paths}
        shared = kinds if shared is None else shared & kinds
    shared = shared or set()
    shared.add(NetworkPathKind.MGMT_ETH)
    for kind in PATH_PREFERENCE:
        if kind in shared:
            return kind
    raise AssertionError("unreachable")


def job_runtime(
    base_ms: int,
    path: NetworkPathKind,
    comm_class: CommClass,
    nnodes: int,
    table: NetworkFactorTable = NetworkFactorTable(),
) -> int:
    """Actual runtime in ms; half-up rounding on the exact rational product."""
    if comm_class is CommClass.SMALL or nnodes <= 1:
        return base_ms
    exact = Fraction(base_ms) * table.factor(path)
    return int(exact + Fraction(1, 2))


@dataclass
class BatchJob:
    id: str
    project: str
    nodes_requested: int
    walltime_ms: int
    base_runtime_ms: int
    comm_class: CommClass = CommClass.SMALL
    state: JobState = JobState.QUEUED
    submit_order: int = -1
    submitted_at: int = -1
    assigned_nodes: tuple[str, ...] = ()
    start_time: int | None = None
    end_time: int | None = None
    path: NetworkPathKind | None = None
    requeues: int = 0

    def validate(self) -> None:
        problems = []
        if self.nodes_requested < 1:
            problems.append("nodes_requested must be >= 1")
        if self.walltime_ms <= 0:
            problems.append("walltime_ms must be > 0")
        if self.base_runtime_ms <= 0:
            problems.append("base_runtime_ms must be > 0")
        if problems:
            raise InvalidJob(f"job {self.id}: " + "; ".join(problems))


@dataclass
class BatchScheduler:
    engine: Engine
    nodes: dict[str, Node]
    factors: NetworkFactorTable = NetworkFactorTable()
    jobs: dict[str, BatchJob] = field(default_factory=dict)
    # FIFO by arrival time, ties by submission call order
    queue: list[tuple[int, int, str]] = field(default_factory=list)
    busy: dict[str, str] = field(default_factory=dict)  # node id -> job id
    log: list[dict] = field(default_factory=list)
    _counter: int = 0
    _end_seq: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.engine.on(EventKind.JOB_SUBMIT, self._on_submit)
        self.engine.on(EventKind.JOB_END, self._on_end)

    def submit(self, job: BatchJob, at: int | None = None) -> None:
        job.validate()
        if job.id in self.jobs:
            raise InvalidJob(f"duplicate job id {job.id}")
        job.submit_order = self._counter
        self._counter += 1
        self.jobs[job.id] = job
        when = self.engine.clock if at is None else max(at, self.engine.clock)
        self.engine.schedule(when, EventKind.JOB_SUBMIT, {"job": job.id})

    def cancel(self, job_id: str) -> None:
        job = self.jobs.get(job_id)
        if job is None:
            raise UnknownJob(job_id)
        if job.state is JobState.QUEUED:
            self.queue.remove((job.submitted_at, job.submit_order, job_id))
        elif job.state is JobState.RUNNING:
            self.engine.cancel(self._end_seq.pop(job_id))
            self._release_nodes(job)
            job.end_time = self.engine.clock
        else:
            return
        job.state = JobState.CANCELLED
        self.log.append({"t": self.engine.clock, "job": job_id, "event": "cancelled"})
        self.try_schedule(self.engine.clock)

    def busy_until(self, node_id: str) -> int:
        job_id = self.busy.get(node_id)
        if job_id is None:
            return self.engine.clock
        return self.jobs[job_id].end_time

    def handle_node_loss(self, node_id: str, t: int) -> None:
        """Requeue the running job when its node is taken for maintenance."""
        job_id = self.busy.get(node_id)
        if job_id is None:
            return
        job = self.jobs[job_id]
        self.engine.cancel(self._end_seq.pop(job_id))
        self._release_nodes(job)
        job.state = JobState.QUEUED
        job.assigned_nodes = ()
        job.start_time = None
        job.end_time = None
        job.path = None
        job.requeues += 1
        insort(self.queue, (job.submitted_at, job.submit_order, job.id))
        self.log.append({"t": t, "job": job_id, "event": "requeued"})
        self.try_schedule(t)

    def node_available(self, t: int) -> None:
        self.try_schedule(t)

    def queued_jobs(self) -> list[BatchJob]:
        return [self.jobs[j] for _, _, j in self.queue]

    def running_jobs(self) -> list[BatchJob]:
        return [j for j in self.jobs.values() if j.state is JobState.RUNNING]

    def try_schedule(self, now: int) -> list[str]:
        """Start every job the policy allows at this instant; returns ids."""
        idle = sorted(
            nid
            for nid, node in self.nodes.items()
            if isinstance(node.state, JoinedBatch) and nid not in self.busy
        )
        started = []
        reservation: float | None = None
        for _, _, job_id in list(self.queue):
            job = self.jobs[job_id]
            k = job.nodes_requested
            if reservation is None:
                if k <= len(idle):
                    self._start(job, idle[:k], now)
                    idle = idle[k:]
                    started.append(job_id)
                else:
                    reservation = self._reserved_start(k, len(idle))
            elif k <= len(idle) and now + job.walltime_ms <= reservation:
                self._start(job, idle[:k], now)
                idle = idle[k:]
                started.append(job_id)
        return started

    # --- internals ---

    def _reserved_start(self, k: int, idle_count: int) -> float:
        need = k - idle_count
        freeing = []
        for job in self.running_jobs():
            usable = sum(
                1
                for nid in job.assigned_nodes
                if isinstance(self.nodes[nid].state, JoinedBatch)
            )
            if usable:
                freeing.append((job.start_time + job.walltime_ms, usable))
        freeing.sort()
        freed = 0
        for est_end, usable in freeing:
            freed += usable
            if freed >= need:
                return est_end
        return math.inf  # head cannot be satisfied by running work at all

    def _start(self, job: BatchJob, node_ids: list[str], now: int) -> None:
        self.queue.remove((job.submitted_at, job.submit_order, job.id))
        for nid in node_ids:
            self.busy[nid] = job.id
        path = common_path(self.nodes[nid] for nid in node_ids)
        runtime = job_runtime(
            job.base_runtime_ms, path, job.comm_class, len(node_ids), self.factors
        )
        job.state = JobState.RUNNING
        job.assigned_nodes = tuple(node_ids)
        job.start_time = now
        job.end_time = now + runtime
        job.path = path
        self._end_seq[job.id] = self.engine.schedule(
            job.end_time, EventKind.JOB_END, {"job": job.id}
        )
        self.engine.schedule(
            now,
            EventKind.JOB_START,
            {"job": job.id, "nodes": list(node_ids), "path": path.value},
        )
        self.log.append(
            {"t": now, "job": job.id, "event": "started", "nodes": list(node_ids),
             "path": path.value, "end": job.end_time}
        )

    def _release_nodes(self, job: BatchJob) -> None:
        for nid in job.assigned_nodes:
            if self.busy.get(nid) == job.id:
                del self.busy[nid]

    def _on_submit(self, event) -> None:
        job = self.jobs[event.payload["job"]]
        if job.state is not JobState.QUEUED or job.submitted_at >= 0:
            return
        job.submitted_at = event.time
        insort(self.queue, (job.submitted_at, job.submit_order, job.id))
        self.log.append({"t": event.time, "job": job.id, "event": "queued"})
        self.try_schedule(event.time)

    def _on_end(self, event) -> None:
        job = self.jobs[event.payload["job"]]
        if job.state is not JobState.RUNNING:
            return
        self._end_seq.pop(job.id, None)
        self._release_nodes(job)
        job.state = JobState.COMPLETED
        self.log.append({"t": event.time, "job": job.id, "event": "completed"})
        self.try_schedule(event.time)
