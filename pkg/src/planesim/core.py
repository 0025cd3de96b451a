"""Shared domain vocabulary: nodes, planes, projects, model profiles.

Holds the fit/cost arithmetic every other module builds on, plus the node
state tags themselves (the lifecycle module owns all transitions between
them; nothing else may assign ``Node.state``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum


class NodeFlavour(Enum):
    VM_COMMODITY = "vm-commodity"
    VM_ENTERPRISE = "vm-enterprise"
    BARE_METAL = "bare-metal"
    HPC_DISKLESS = "hpc-diskless"

    @property
    def ephemeral(self) -> bool:
        """Diskless nodes lose all local state on reboot."""
        return self is NodeFlavour.HPC_DISKLESS

    @property
    def may_host_control_plane(self) -> bool:
        return self in (NodeFlavour.VM_COMMODITY, NodeFlavour.VM_ENTERPRISE)


class NetworkPathKind(Enum):
    MGMT_ETH = "mgmt-eth"
    HSN_TCP_SINGLE = "hsn-tcp-single"
    HSN_TCP_MULTI = "hsn-tcp-multi"
    HSN_RDMA = "hsn-rdma"


# Preferred order when a job allocation picks the path shared by all its nodes.
PATH_PREFERENCE = (
    NetworkPathKind.HSN_RDMA,
    NetworkPathKind.HSN_TCP_MULTI,
    NetworkPathKind.HSN_TCP_SINGLE,
    NetworkPathKind.MGMT_ETH,
)


@dataclass(frozen=True)
class NetworkPath:
    kind: NetworkPathKind
    lanes: int = 1

    def __post_init__(self):
        if self.lanes < 1:
            raise ValueError("lanes must be >= 1")
        if self.kind is NetworkPathKind.HSN_TCP_MULTI and self.lanes <= 1:
            raise ValueError("hsn-tcp-multi requires lanes > 1")


# --- node lifecycle state tags (transitions owned by planesim.lifecycle) ---

@dataclass(frozen=True)
class Detached:
    pass


@dataclass(frozen=True)
class Provisioning:
    pass


@dataclass(frozen=True)
class JoinedBatch:
    pass


@dataclass(frozen=True)
class JoinedService:
    cluster: str


@dataclass(frozen=True)
class Draining:
    from_state: str
    to_state: str


@dataclass(frozen=True)
class Rebooting:
    to_state: str


@dataclass(frozen=True)
class Maintenance:
    pass


NodeState = Detached | Provisioning | JoinedBatch | JoinedService | Draining | Rebooting | Maintenance


def _check_kv_strings(values, what):
    for v in values:
        key = v.split("=", 1)[0]
        if not key or any(c.isspace() for c in key):
            raise ValueError(f"{what} key must be nonempty without whitespace: {v!r}")


@dataclass
class Node:
    """A compute resource; the unit moved between the batch and service planes."""

    id: str
    flavour: NodeFlavour
    gpus: int = 0
    gpu_mem_gb: float = 0.0
    cpu_cores: int = 0
    network_paths: tuple[NetworkPath, ...] = ()
    labels: frozenset[str] = frozenset()
    taints: frozenset[str] = frozenset()
    state: NodeState = field(default_factory=Detached)
    # Model weights currently resident, by model name. Cleared on reboot for
    # diskless flavours; local_cache_gb is the summed view required elsewhere.
    cached_weights: dict[str, float] = field(default_factory=dict)
    transient_labels: set[str] = field(default_factory=set)

    def __post_init__(self):
        if self.gpus < 0:
            raise ValueError("gpus must be >= 0")
        if self.gpus > 0 and self.gpu_mem_gb <= 0:
            raise ValueError("gpu_mem_gb must be > 0 when gpus > 0")
        _check_kv_strings(self.labels, "label")
        _check_kv_strings(self.taints, "taint")

    @property
    def local_cache_gb(self) -> float:
        return sum(self.cached_weights.values())

    def effective_labels(self) -> frozenset[str]:
        return self.labels | frozenset(self.transient_labels)


@dataclass(frozen=True)
class RateLimitSpec:
    capacity: int
    refill_per_s: float

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if self.refill_per_s <= 0:
            raise ValueError("refill_per_s must be > 0")


@dataclass
class Project:
    id: str
    members: frozenset[str] = frozenset()
    token_budget: int = 0
    credit_budget: int = 0
    rate_limit: RateLimitSpec | None = None
    allowed_models: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.token_budget < 0:
            raise ValueError("token_budget must be >= 0")
        if self.credit_budget < 0:
            raise ValueError("credit_budget must be >= 0")


@dataclass(frozen=True)
class ApiKey:
    key: str
    project_id: str
    per_key_budget: int | None = None
    expiry: int | None = None  # SimTime ms; expired keys never authenticate


@dataclass(frozen=True)
class ModelProfile:
    """Resource footprint and latency parameters of one served model."""

    name: str
    params_b: float
    weights_gb: float
    gpus_required: int
    max_concurrent: int
    ttft_base_ms: int
    prefill_per_token_ms: float
    itl_ms: int
    cost_per_1k_tokens: float
    hot: bool = False
    max_context: int = 8192

    def __post_init__(self):
        if self.gpus_required < 1:
            raise ValueError("gpus_required must be >= 1")
        if self.itl_ms <= 0:
            raise ValueError("itl_ms must be > 0")
        if self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")
        if self.weights_gb <= 0:
            raise ValueError("weights_gb must be > 0")


@dataclass(frozen=True)
class Requirement:
    """Placement requirement checked by node_fits."""

    gpus: int = 0
    gpu_mem_gb: float = 0.0
    required_labels: frozenset[str] = frozenset()
    tolerated_taints: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.gpus < 0 or self.gpu_mem_gb < 0:
            raise ValueError("requirement fields must be non-negative")


def node_fits(requirement: Requirement, node: Node) -> bool:
    """True iff the node satisfies GPU count/memory, labels, and taint tolerations.

    Taint semantics are deliberately simple: every node taint must appear in
    the requirement's tolerations, with no effect gradations.
    """
    if node.gpus < requirement.gpus:
        return False
    if requirement.gpus > 0 and node.gpu_mem_gb < requirement.gpu_mem_gb:
        return False
    if requirement.gpu_mem_gb > 0 and node.gpu_mem_gb < requirement.gpu_mem_gb:
        return False
    labels = node.effective_labels()
    if not requirement.required_labels <= labels:
        return False
    if not node.taints <= requirement.tolerated_taints:
        return False
    return True


def token_cost(tokens: int, profile: ModelProfile) -> int:
    """Integer credits for a token count: tokens * rate / 1000, half-up."""
    if tokens < 0:
        raise ValueError("tokens must be >= 0")
    raw = Decimal(tokens) * Decimal(str(profile.cost_per_1k_tokens)) / Decimal(1000)
    return int(raw.quantize(Decimal(1), rounding=ROUND_HALF_UP))


def pool_capacity(nodes, profile: ModelProfile) -> int:
    """Replica slots across service-joined nodes; one replica never spans nodes."""
    total = 0
    for node in nodes:
        if isinstance(node.state, JoinedService):
            total += node.gpus // profile.gpus_required
    return total
