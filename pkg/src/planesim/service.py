"""Service plane: declarative deployments reconciled onto service nodes.

Deployments state a desired replica count; reconciliation places Pending
replicas onto eligible nodes in sorted order (deployments by id, nodes by
id, first fit on free GPUs). A replica whose model weights are already in
the node's local cache starts Running immediately; otherwise it Warms for
the time it takes to fetch the weights, then caches them. Replicas never
span nodes.

Evicting a node (drain or maintenance) sends its replicas back to Pending
without touching the gateway: completions for requests already dispatched
stay scheduled, which is how in-flight work survives replica loss.

GPU time is integrated continuously: allocated GPU-ms (replicas warming or
running) against available GPU-ms (GPUs on service-joined nodes), so a run
can report plane utilization without sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

from .core import JoinedService, ModelProfile, Node, Requirement, node_fits
from .engine import Engine, EventKind
from .errors import ConfigError


def warmup_ms(weights_gb: float, fetch_bw_gbps: float) -> int:
    """Time to pull model weights onto a node at the given bandwidth."""
    if fetch_bw_gbps <= 0:
        raise ValueError("fetch bandwidth must be > 0")
    exact = Fraction(str(weights_gb)) * 1000 / Fraction(str(fetch_bw_gbps))
    return int(exact + Fraction(1, 2))


@dataclass
class Deployment:
    id: str
    project: str
    model: str
    replicas: int
    cluster: str = "infer"
    required_labels: frozenset[str] = frozenset()
    tolerated_taints: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.replicas < 0:
            raise ValueError("replicas must be >= 0")


@dataclass
class Replica:
    id: str
    deployment: str
    model: str
    index: int
    state: str = "pending"  # pending | warming | running
    node: str | None = None
    warm_until: int | None = None
    _warm_seq: int | None = None


@dataclass
class ServicePlane:
    engine: Engine
    nodes: dict[str, Node]
    profiles: dict[str, ModelProfile]
    fetch_bw_gbps: float = 2.0
    deployments: dict[str, Deployment] = field(default_factory=dict)
    replicas: dict[str, Replica] = field(default_factory=dict)
    log: list[dict] = field(default_factory=list)
    # called with (replica, t) whenever a replica enters running
    run_hooks: list[Callable[[Replica, int], None]] = field(default_factory=list)
    _gpus_used: dict[str, int] = field(default_factory=dict)
    # closed segments of constant capacity: (start, end, allocated, available)
    timeline: list[tuple[int, int, int, int]] = field(default_factory=list)
    _acc_alloc: int = 0
    _acc_avail: int = 0
    _last_t: int = 0

    def __post_init__(self):
        self.engine.on(EventKind.NODE_TRANSITION_STEP, self._on_warm)

    # --- desired state ---

    def apply(self, dep: Deployment) -> None:
        if dep.model not in self.profiles:
            raise ConfigError(f"deployment {dep.id} references unknown model {dep.model!r}")
        self.deployments[dep.id] = dep
        self._resize(dep)

    def remove(self, dep_id: str) -> None:
        dep = self.deployments.pop(dep_id)
        dep.replicas = 0
        self._resize(dep)

    def _resize(self, dep: Deployment) -> None:
        now = self.engine.clock
        mine = sorted(
            (r for r in self.replicas.values() if r.deployment == dep.id),
            key=lambda r: r.index,
        )
        while len(mine) > dep.replicas:
            victim = mine.pop()  # highest index goes first
            self._teardown(victim, now, reason="scale-down")
        used = {r.index for r in mine}
        idx = 0
        while len(mine) < dep.replicas:
            while idx in used:
                idx += 1
            used.add(idx)
            rep = Replica(
                id=f"{dep.id}/{idx}", deployment=dep.id, model=dep.model, index=idx
            )
            self.replicas[rep.id] = rep
            mine.append(rep)

    # --- reconciliation ---

    def reconcile(self, now: int) -> list[dict]:
        actions = []
        pending = sorted(
            (r for r in self.replicas.values() if r.state == "pending"),
            key=lambda r: (r.deployment, r.index),
        )
        for rep in pending:
            node = self._find_node(rep)
            if node is None:
                continue
            self._touch(now)
            profile = self.profiles[rep.model]
            self._gpus_used[node.id] = (
                self._gpus_used.get(node.id, 0) + profile.gpus_required
            )
            rep.node = node.id
            if rep.model in node.cached_weights:
                rep.state = "running"
                actions.append(
                    {"t": now, "action": "run", "replica": rep.id, "node": node.id,
                     "warm": True}
                )
                for hook in self.run_hooks:
                    hook(rep, now)
            else:
                rep.state = "warming"
                rep.warm_until = now + warmup_ms(profile.weights_gb, self.fetch_bw_gbps)
                rep._warm_seq = self.engine.schedule(
                    rep.warm_until,
                    EventKind.NODE_TRANSITION_STEP,
                    {"node": node.id, "state": "replica-warm", "replica": rep.id},
                )
                actions.append(
                    {"t": now, "action": "warm", "replica": rep.id, "node": node.id,
                     "until": rep.warm_until}
                )
        self.log.extend(actions)
        return actions

    def _find_node(self, rep: Replica) -> Node | None:
        dep = self.deployments[rep.deployment]
        profile = self.profiles[rep.model]
        req = Requirement(
            gpus=profile.gpus_required,
            required_labels=dep.required_labels,
            tolerated_taints=dep.tolerated_taints,
        )
        for nid in sorted(self.nodes):
            node = self.nodes[nid]
            if not isinstance(node.state, JoinedService):
                continue
            if node.state.cluster != dep.cluster:
                continue
            if not node_fits(req, node):
                continue
            free = node.gpus - self._gpus_used.get(nid, 0)
            if free >= profile.gpus_required:
                return node
        return None

    # --- disruptions ---

    def evict_node(self, node_id: str, t: int) -> list[str]:
        """All replicas on the node go back to Pending; returns their ids."""
        evicted = []
        for rep in sorted(self.replicas.values(), key=lambda r: r.id):
            if rep.node != node_id or rep.state == "pending":
                continue
            self._touch(t)
            if rep._warm_seq is not None:
                self.engine.cancel(rep._warm_seq)
            self._free(rep)
            rep.state = "pending"
            evicted.append(rep.id)
            self.log.append(
                {"t": t, "action": "evict", "replica": rep.id, "node": node_id}
            )
        return evicted

    def _teardown(self, rep: Replica, now: int, reason: str) -> None:
        if rep.state != "pending":
            self._touch(now)
            if rep._warm_seq is not None:
                self.engine.cancel(rep._warm_seq)
            self._free(rep)
        del self.replicas[rep.id]
        self.log.append(
            {"t": now, "action": "remove", "replica": rep.id, "reason": reason}
        )

    def _free(self, rep: Replica) -> None:
        profile = self.profiles[rep.model]
        self._gpus_used[rep.node] -= profile.gpus_required
        rep.node = None
        rep.warm_until = None
        rep._warm_seq = None

    # --- views ---

    def running(self, model: str | None = None) -> list[Replica]:
        out = [
            r
            for r in self.replicas.values()
            if r.state == "running" and (model is None or r.model == model)
        ]
        return sorted(out, key=lambda r: r.id)

    def pending_count(self, deployment: str | None = None) -> int:
        return sum(
            1
            for r in self.replicas.values()
            if r.state == "pending"
            and (deployment is None or r.deployment == deployment)
        )

    def allocated_gpus(self) -> int:
        return sum(self._gpus_used.values())

    def gpus_allocated_on(self, node_id: str) -> int:
        return self._gpus_used.get(node_id, 0)

    def available_gpus(self) -> int:
        return sum(
            n.gpus for n in self.nodes.values() if isinstance(n.state, JoinedService)
        )

    # --- accounting ---

    def touch(self, now: int) -> None:
        """Integrate GPU time up to now; call on any capacity change."""
        self._touch(now)

    def _touch(self, now: int) -> None:
        dt = now - self._last_t
        if dt > 0:
            alloc, avail = self.allocated_gpus(), self.available_gpus()
            self._acc_alloc += alloc * dt
            self._acc_avail += avail * dt
            self.timeline.append((self._last_t, now, alloc, avail))
            self._last_t = now

    def gpu_time(self, now: int) -> tuple[int, int]:
        """(allocated GPU-ms, available GPU-ms) integrated up to now."""
        self._touch(now)
        return self._acc_alloc, self._acc_avail

    # --- events ---

    def _on_warm(self, event) -> None:
        if event.payload.get("state") != "replica-warm":
            return
        rep = self.replicas.get(event.payload["replica"])
        if rep is None or rep.state != "warming" or rep._warm_seq != event.seq:
            return
        node = self.nodes[rep.node]
        profile = self.profiles[rep.model]
        node.cached_weights[rep.model] = profile.weights_gb
        rep.state = "running"
        rep.warm_until = None
        rep._warm_seq = None
        self.log.append(
            {"t": event.time, "action": "run", "replica": rep.id, "node": rep.node,
             "warm": False}
        )
        for hook in self.run_hooks:
            hook(rep, event.time)
