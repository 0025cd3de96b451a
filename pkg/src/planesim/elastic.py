"""Elastic capacity: a baseline the service plane always keeps, plus delta
nodes borrowed from the batch plane under pressure and returned when idle.

The baseline floor is defined constructively: first-fit-decreasing packing
of the baseline replica set onto uniform nodes, items ordered by GPU need
descending then name. That makes the floor a reproducible number rather
than an optimization problem, at the cost of occasionally packing one node
above the true optimum.

The demand policy reads one poll window at a time and applies hysteresis:
pressure (p99 queue wait over threshold, or replicas stuck Pending) must
persist for a configured number of consecutive windows before a node is
borrowed, idleness must persist before one is returned, and every action
starts a cooldown. Nodes already moving toward the service plane count as
capacity already bought, so a slow reboot does not trigger a second borrow
for the same pressure. Returns only ever touch borrowed nodes, never the
baseline, and never fire in a window that also shows pressure.

Decisions are pure: (window stats, config, state) in, (action, new state)
out, with the poller owning all engine and lifecycle plumbing. One node per
poll, in either direction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .core import JoinedBatch, JoinedService, ModelProfile
from .engine import Engine, EventKind
from .errors import InfeasibleProfile
from .gateway import Gateway, percentile


def baseline_floor(replica_profiles: list[ModelProfile], node_gpus: int) -> int:
    """Nodes needed for the baseline replica set, one profile entry per replica."""
    for profile in replica_profiles:
        if profile.gpus_required > node_gpus:
            raise InfeasibleProfile(
                f"{profile.name} needs {profile.gpus_required} GPUs, nodes have {node_gpus}"
            )
    items = sorted(replica_profiles, key=lambda p: (-p.gpus_required, p.name))
    bins: list[int] = []
    for item in items:
        for i, free in enumerate(bins):
            if free >= item.gpus_required:
                bins[i] = free - item.gpus_required
                break
        else:
            bins.append(node_gpus - item.gpus_required)
    return len(bins)


@dataclass(frozen=True)
class DemandPolicyConfig:
    queue_wait_p99_ms: int = 5_000
    util_release_threshold: float = 0.3
    windows_up: int = 2
    windows_down: int = 3
    cooldown_ms: int = 600_000
    max_delta_nodes: int = 4


@dataclass(frozen=True)
class ScheduleWindow:
    start_hour: int
    end_hour: int
    delta_nodes: int

    def __post_init__(self):
        if not 0 <= self.start_hour < self.end_hour <= 24:
            raise ValueError("window hours must satisfy 0 <= start < end <= 24")
        if self.delta_nodes < 0:
            raise ValueError("delta_nodes must be >= 0")


@dataclass(frozen=True)
class SchedulePolicyConfig:
    windows: tuple[ScheduleWindow, ...] = ()
    cooldown_ms: int = 0

    def desired_delta(self, t_ms: int) -> int:
        hour = (t_ms // 3_600_000) % 24
        return max(
            (w.delta_nodes for w in self.windows if w.start_hour <= hour < w.end_hour),
            default=0,
        )


@dataclass(frozen=True)
class ScalerState:
    up_streak: int = 0
    down_streak: int = 0
    last_action_t: int = -(10**15)
    borrowed: tuple[str, ...] = ()


@dataclass(frozen=True)
class Acquire:
    node: str


@dataclass(frozen=True)
class Release:
    node: str


@dataclass(frozen=True)
class Hold:
    reason: str


Action = Acquire | Release | Hold


def decide_demand(
    stats: dict, cfg: DemandPolicyConfig, state: ScalerState, now: int
) -> tuple[Action, ScalerState]:
    p99 = stats.get("queue_wait_p99")
    pending = stats["pending_replicas"]
    queued = stats["queued_requests"]
    util = stats.get("utilization")

    up = (p99 is not None and p99 >= cfg.queue_wait_p99_ms) or pending > 0
    down = (
        not up
        and util is not None
        and util < cfg.util_release_threshold
        and pending == 0
        and queued == 0
    )
    if up:
        state = replace(state, up_streak=state.up_streak + 1, down_streak=0)
    elif down:
        state = replace(state, up_streak=0, down_streak=state.down_streak + 1)
    else:
        state = replace(state, up_streak=0, down_streak=0)

    cooled = now - state.last_action_t >= cfg.cooldown_ms

    if state.up_streak >= cfg.windows_up:
        if not cooled:
            return Hold("cooldown"), state
        if stats["incoming_gpus"] > 0 and stats["incoming_gpus"] >= stats["pending_gpus"]:
            return Hold("incoming-capacity"), state
        if len(state.borrowed) >= cfg.max_delta_nodes:
            return Hold("delta-cap"), state
        eligible = stats["eligible_acquire"]
        if not eligible:
            return Hold("no-eligible-node"), state
        node = eligible[0]
        state = replace(
            state, borrowed=state.borrowed + (node,), last_action_t=now
        )
        return Acquire(node), state

    if state.down_streak >= cfg.windows_down and state.up_streak == 0:
        if not cooled:
            return Hold("cooldown"), state
        eligible = stats["eligible_release"]
        if not eligible:
            return Hold("nothing-borrowed"), state
        node = eligible[0]
        state = replace(
            state,
            borrowed=tuple(n for n in state.borrowed if n != node),
            last_action_t=now,
        )
        return Release(node), state

    return Hold("steady"), state


def decide_schedule(
    stats: dict, cfg: SchedulePolicyConfig, state: ScalerState, now: int
) -> tuple[Action, ScalerState]:
    desired = cfg.desired_delta(now)
    have = len(state.borrowed)
    if now - state.last_action_t < cfg.cooldown_ms:
        return Hold("cooldown"), state
    if have < desired:
        eligible = stats["eligible_acquire"]
        if not eligible:
            return Hold("no-eligible-node"), state
        node = eligible[0]
        state = replace(state, borrowed=state.borrowed + (node,), last_action_t=now)
        return Acquire(node), state
    if have > desired:
        eligible = stats["eligible_release"]
        if not eligible:
            return Hold("nothing-borrowed"), state
        node = eligible[0]
        state = replace(
            state,
            borrowed=tuple(n for n in state.borrowed if n != node),
            last_action_t=now,
        )
        return Release(node), state
    return Hold("on-target"), state


@dataclass
class ScalePoller:
    """Periodic tick that gathers window stats, decides, and executes."""

    engine: Engine
    lifecycle: object  # NodeLifecycle; kept loose to avoid an import cycle
    batch: object  # BatchScheduler
    service: object  # ServicePlane
    gateway: Gateway
    cluster: str = "infer"
    policy: str = "demand"
    demand_cfg: DemandPolicyConfig = DemandPolicyConfig()
    schedule_cfg: SchedulePolicyConfig = SchedulePolicyConfig()
    interval_ms: int = 60_000
    horizon: int = 0
    state: ScalerState = ScalerState()
    moves: dict[str, str] = field(default_factory=dict)  # node -> direction
    decisions: list[dict] = field(default_factory=list)
    _window_start: int = 0

    def start(self, horizon: int) -> None:
        self.horizon = horizon
        self.engine.on(EventKind.SCALE_POLL_TICK, self._on_tick)
        self.lifecycle.observers.append(self._on_node_state)
        first = self.engine.clock + self.interval_ms
        if first <= horizon:
            self.engine.schedule(first, EventKind.SCALE_POLL_TICK, {"poller": self.cluster})

    def _on_tick(self, event) -> None:
        if event.payload.get("poller") != self.cluster:
            return
        now = event.time
        stats = self.gather(now)
        if self.policy == "schedule":
            action, self.state = decide_schedule(stats, self.schedule_cfg, self.state, now)
        else:
            action, self.state = decide_demand(stats, self.demand_cfg, self.state, now)
        self._execute(action, now, stats)
        self._window_start = now
        nxt = now + self.interval_ms
        if nxt <= self.horizon:
            self.engine.schedule(nxt, EventKind.SCALE_POLL_TICK, {"poller": self.cluster})

    def gather(self, now: int) -> dict:
        waits: list[int] = []
        snapshots = []
        for model in sorted({d.model for d in self.service.deployments.values()}):
            waits.extend(self.gateway.window_queue_waits(model, self._window_start, now))
            snapshots.append(self.gateway.pool_snapshot(model))
        capacity = sum(s["capacity"] for s in snapshots)
        in_flight = sum(s["in_flight"] for s in snapshots)
        queued = sum(s["queued"] for s in snapshots)
        pending_gpus = sum(
            self.service.profiles[r.model].gpus_required
            for r in self.service.replicas.values()
            if r.state == "pending"
        )
        incoming_gpus = sum(
            self.lifecycle.nodes[nid].gpus
            for nid, direction in self.moves.items()
            if direction == "to-service"
        )
        eligible_acquire = tuple(
            nid
            for _, nid in sorted(
                (self.batch.busy_until(nid), nid)
                for nid, node in self.lifecycle.nodes.items()
                if isinstance(node.state, JoinedBatch) and nid not in self.moves
            )
        )
        eligible_release = tuple(
            nid
            for _, nid in sorted(
                (self.service.gpus_allocated_on(nid), nid)
                for nid in self.state.borrowed
                if nid not in self.moves
                and isinstance(self.lifecycle.nodes[nid].state, JoinedService)
            )
        )
        return {
            "queue_wait_p99": percentile(waits, 99) if waits else None,
            "pending_replicas": self.service.pending_count(),
            "pending_gpus": pending_gpus,
            "queued_requests": queued,
            "utilization": (in_flight / capacity) if capacity else None,
            "incoming_gpus": incoming_gpus,
            "eligible_acquire": eligible_acquire,
            "eligible_release": eligible_release,
        }

    def _execute(self, action: Action, now: int, stats: dict) -> None:
        row = {
            "t": now,
            "policy": self.policy,
            "action": type(action).__name__.lower(),
            "queue_wait_p99": stats["queue_wait_p99"],
            "pending_replicas": stats["pending_replicas"],
            "utilization": stats["utilization"],
            "borrowed": list(self.state.borrowed),
        }
        if isinstance(action, Acquire):
            self.moves[action.node] = "to-service"
            self.lifecycle.request_transition(
                action.node,
                JoinedService(self.cluster),
                busy_until=self.batch.busy_until(action.node),
            )
            row["node"] = action.node
        elif isinstance(action, Release):
            self.moves[action.node] = "to-batch"
            self.lifecycle.request_transition(action.node, JoinedBatch())
            row["node"] = action.node
        else:
            row["reason"] = action.reason
        self.decisions.append(row)

    def _on_node_state(self, node, old, new, t) -> None:
        if node.id in self.moves and isinstance(new, (JoinedService, JoinedBatch)):
            del self.moves[node.id]
