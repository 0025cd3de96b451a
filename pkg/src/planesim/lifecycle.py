"""Node lifecycle: plane moves, reboot-as-recreate, maintenance windows.

This module is the only writer of ``Node.state``. Transitions are planned as
absolute-time step lists and executed through engine events, so a replayed
run reproduces the same state changes at the same instants.

Rules encoded here:
- moving into or out of the batch plane reboots the node (plane image swap);
  service to service moves do not, which is what lets a warmed model cache
  survive a cluster reassignment
- ephemeral (diskless) nodes lose cached weights and transient labels the
  moment a reboot, maintenance, or detach begins
- draining never preempts: a batch node stays Draining until its running job
  ends; service replicas are evicted immediately, their in-flight requests
  complete because completions are already scheduled
- detaching powers the node off, so no scrub reboot is planned for it
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

from .core import (
    Detached,
    Draining,
    JoinedBatch,
    JoinedService,
    Maintenance,
    Node,
    NodeState,
    Provisioning,
    Rebooting,
)
from .engine import Engine, EventKind
from .errors import (
    OverlappingMaintenance,
    SchedulingInPast,
    TransitionConflict,
    Unauthorized,
)

REBOOT_MS = 600_000
JOIN_MS = 120_000
DETACH_MS = 60_000


@dataclass(frozen=True)
class TransitionSpec:
    reboot_ms: int = REBOOT_MS
    join_ms: int = JOIN_MS
    detach_ms: int = DETACH_MS


@dataclass(frozen=True)
class PlanStep:
    at: int
    state: NodeState


@dataclass(frozen=True)
class MaintenanceWindow:
    node_id: str
    start: int
    end: int
    authorized_by: str
    reason: str = ""


def describe(state: NodeState) -> str:
    if isinstance(state, Detached):
        return "detached"
    if isinstance(state, Provisioning):
        return "provisioning"
    if isinstance(state, JoinedBatch):
        return "joined-batch"
    if isinstance(state, JoinedService):
        return f"joined-service:{state.cluster}"
    if isinstance(state, Draining):
        return f"draining:{state.from_state}->{state.to_state}"
    if isinstance(state, Rebooting):
        return f"rebooting:{state.to_state}"
    if isinstance(state, Maintenance):
        return "maintenance"
    raise TypeError(f"unknown state {state!r}")


def _same_target(current: NodeState, target: NodeState) -> bool:
    if type(current) is not type(target):
        return False
    if isinstance(current, JoinedService):
        return current.cluster == target.cluster
    return True


def plan_transition(
    node: Node,
    target: NodeState,
    now: int,
    spec: TransitionSpec = TransitionSpec(),
    busy_until: int = 0,
) -> list[PlanStep]:
    """Step list from the node's current state to the target.

    busy_until is the sim time at which running batch work ends; draining a
    batch node waits for it. Raises TransitionConflict if the node is already
    mid-transition or already at the target.
    """
    current = node.state
    if isinstance(current, (Draining, Rebooting, Provisioning, Maintenance)):
        raise TransitionConflict(
            f"node {node.id} is {describe(current)}; wait for it to settle"
        )
    if _same_target(current, target):
        raise TransitionConflict(f"node {node.id} is already {describe(target)}")
    if not isinstance(target, (JoinedBatch, JoinedService, Detached)):
        raise TransitionConflict(f"cannot target transient state {describe(target)}")

    steps: list[PlanStep] = []
    t = now
    from_batch = isinstance(current, JoinedBatch)
    from_service = isinstance(current, JoinedService)
    to_batch = isinstance(target, JoinedBatch)

    if from_batch or from_service:
        steps.append(PlanStep(t, Draining(describe(current), describe(target))))
        if from_batch:
            t = max(t, busy_until)
        if isinstance(target, Detached):
            t += spec.detach_ms

    if isinstance(target, Detached):
        steps.append(PlanStep(t, Detached()))
        return steps

    if (from_batch or to_batch) and not isinstance(current, Detached):
        steps.append(PlanStep(t, Rebooting(describe(target))))
        t += spec.reboot_ms

    steps.append(PlanStep(t, Provisioning()))
    t += spec.join_ms
    steps.append(PlanStep(t, target))
    return steps


StateObserver = Callable[[Node, NodeState, NodeState, int], None]


@dataclass
class NodeLifecycle:
    """Executes transition plans and maintenance windows on the engine."""

    engine: Engine
    spec: TransitionSpec = TransitionSpec()
    operators: frozenset[str] = frozenset()
    nodes: dict[str, Node] = field(default_factory=dict)
    # pre_observers run before the state is assigned, so accounting that
    # integrates over time can close the open interval at its old capacity
    pre_observers: list[StateObserver] = field(default_factory=list)
    observers: list[StateObserver] = field(default_factory=list)
    log: list[dict] = field(default_factory=list)
    _pending: dict[str, list[tuple[int, PlanStep]]] = field(default_factory=dict)
    _resume: dict[str, NodeState] = field(default_factory=dict)
    _windows: list[MaintenanceWindow] = field(default_factory=list)

    def __post_init__(self):
        self.engine.on(EventKind.NODE_TRANSITION_STEP, self._on_step)
        self.engine.on(EventKind.MAINTENANCE_START, self._on_maintenance_start)
        self.engine.on(EventKind.MAINTENANCE_END, self._on_maintenance_end)

    def add_node(self, node: Node) -> None:
        if node.id in self.nodes:
            raise ValueError(f"duplicate node id {node.id}")
        self.nodes[node.id] = node

    def in_transition(self, node_id: str) -> bool:
        return bool(self._pending.get(node_id))

    def request_transition(
        self, node_id: str, target: NodeState, busy_until: int | None = None
    ) -> list[PlanStep]:
        node = self.nodes[node_id]
        if self.in_transition(node_id):
            raise TransitionConflict(f"node {node_id} already has a transition in flight")
        now = self.engine.clock
        plan = plan_transition(
            node, target, now, self.spec,
            busy_until=now if busy_until is None else busy_until,
        )
        queued = []
        for i, step in enumerate(plan):
            seq = self.engine.schedule(
                step.at,
                EventKind.NODE_TRANSITION_STEP,
                {"node": node_id, "state": describe(step.state), "i": i},
            )
            queued.append((seq, step))
        self._pending[node_id] = queued
        return plan

    def schedule_maintenance(self, window: MaintenanceWindow) -> None:
        now = self.engine.clock
        if window.node_id not in self.nodes:
            raise KeyError(f"unknown node {window.node_id}")
        if window.start < now:
            raise SchedulingInPast(f"window starts at {window.start}, now is {now}")
        if window.end <= window.start:
            raise ValueError("window end must be after start")
        if window.authorized_by not in self.operators:
            raise Unauthorized(
                f"{window.authorized_by!r} may not schedule maintenance"
            )
        for other in self._windows:
            if other.node_id != window.node_id:
                continue
            if window.start < other.end and other.start < window.end:
                raise OverlappingMaintenance(
                    f"node {window.node_id} already has a window "
                    f"[{other.start}, {other.end})"
                )
        self._windows.append(window)
        payload = {"node": window.node_id, "start": window.start, "end": window.end}
        self.engine.schedule(window.start, EventKind.MAINTENANCE_START, payload)
        self.engine.schedule(window.end, EventKind.MAINTENANCE_END, payload)

    def windows(self, node_id: str) -> list[MaintenanceWindow]:
        return [w for w in self._windows if w.node_id == node_id]

    # --- event handlers ---

    def _on_step(self, event) -> None:
        node_id = event.payload["node"]
        queued = self._pending.get(node_id)
        if not queued or queued[0][0] != event.seq:
            return  # superseded by maintenance preemption
        _, step = queued.pop(0)
        if not queued:
            del self._pending[node_id]
        self._apply(self.nodes[node_id], step.state, event.time, reason="transition")

    def _on_maintenance_start(self, event) -> None:
        node = self.nodes[event.payload["node"]]
        # remember where to put the node back afterwards
        if self.in_transition(node.id):
            queued = self._pending.pop(node.id)
            for seq, _ in queued:
                self.engine.cancel(seq)
            self._resume[node.id] = queued[-1][1].state
        else:
            self._resume[node.id] = node.state
        self._apply(node, Maintenance(), event.time, reason="maintenance-start")

    def _on_maintenance_end(self, event) -> None:
        node = self.nodes[event.payload["node"]]
        target = self._resume.pop(node.id, Detached())
        t = event.time
        steps: list[PlanStep]
        if isinstance(target, JoinedService):
            steps = [
                PlanStep(t, Provisioning()),
                PlanStep(t + self.spec.join_ms, target),
            ]
        elif isinstance(target, JoinedBatch):
            steps = [
                PlanStep(t, Rebooting(describe(target))),
                PlanStep(t + self.spec.reboot_ms, Provisioning()),
                PlanStep(t + self.spec.reboot_ms + self.spec.join_ms, target),
            ]
        else:
            steps = [PlanStep(t, Detached())]
        queued = []
        for i, step in enumerate(steps):
            seq = self.engine.schedule(
                step.at,
                EventKind.NODE_TRANSITION_STEP,
                {"node": node.id, "state": describe(step.state), "i": i},
            )
            queued.append((seq, step))
        self._pending[node.id] = queued

    def _apply(self, node: Node, new_state: NodeState, t: int, reason: str) -> None:
        old = node.state
        for observer in self.pre_observers:
            observer(node, old, new_state, t)
        node.state = new_state
        if node.flavour.ephemeral and isinstance(
            new_state, (Rebooting, Maintenance, Detached)
        ):
            node.cached_weights.clear()
            node.transient_labels.clear()
        self.log.append(
            {"t": t, "node": node.id, "from": describe(old),
             "to": describe(new_state), "reason": reason}
        )
        for observer in self.observers:
            observer(node, old, new_state, t)
