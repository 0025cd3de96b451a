"""Inference gateway: authentication, quotas, routing, latency, usage ledger.

Admission runs in a fixed order so a request failing several checks always
reports the same reason: unknown or expired key, then model allowlist, then
rate limit, then budget. A request that passes reserves its worst case
(prompt plus declared max output tokens, and the credits that worst case
would cost) before it is allowed to queue; settlement at completion charges
actuals and releases the rest. All budget arithmetic is integer, so the
conservation identity

    initial - remaining == settled + outstanding

holds exactly at every instant, for tokens and credits alike, per project
and per key.

Routing is deterministic: among running replicas of the model the one with
the fewest requests in flight wins, ties broken by replica id; when every
replica is saturated the request waits in a per-model FIFO queue. Latency
is linear: time to first token is queue wait plus a model constant plus a
per-prompt-token prefill term, and each further output token adds the
model's inter-token latency. Completions stay scheduled even if their
replica is evicted first, so in-flight work survives replica loss.

Rate limiting is a token bucket per API key with exact rational refill
arithmetic: a bucket filled at 0.3 tokens per second never drifts however
long the run.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction

from .core import ApiKey, ModelProfile, Project, RateLimitSpec, token_cost
from .engine import Engine, EventKind
from .errors import DoubleSettle
from .service import Replica, ServicePlane

OK = "ok"
UNAUTHORIZED = "unauthorized"
FORBIDDEN_MODEL = "forbidden-model"
RATE_LIMITED = "rate-limited"
OVER_BUDGET = "over-budget"

STATUS_HTTP = {
    OK: 200,
    UNAUTHORIZED: 401,
    FORBIDDEN_MODEL: 403,
    RATE_LIMITED: 429,
    OVER_BUDGET: 402,
}


def percentile(values, p: float) -> float:
    """Nearest-rank percentile: rank = min(n, floor(p/100 * n) + 1).

    With 99 fast values and one slow one, p99 of 100 samples is the slow
    one, which is the behaviour a latency objective cares about.
    """
    if not values:
        raise ValueError("percentile of empty sequence")
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    ordered = sorted(values)
    rank = min(len(ordered), int(Fraction(str(p)) / 100 * len(ordered)) + 1)
    return ordered[rank - 1]


@dataclass
class TokenBucket:
    capacity: int
    refill_per_s: Fraction
    level: Fraction
    last: int

    @classmethod
    def from_spec(cls, spec: RateLimitSpec, now: int) -> TokenBucket:
        return cls(
            capacity=spec.capacity,
            refill_per_s=Fraction(str(spec.refill_per_s)),
            level=Fraction(spec.capacity),
            last=now,
        )

    def _refill(self, now: int) -> None:
        if now > self.last:
            gained = self.refill_per_s * (now - self.last) / 1000
            self.level = min(Fraction(self.capacity), self.level + gained)
            self.last = now

    def take(self, now: int) -> bool:
        self._refill(now)
        if self.level >= 1:
            self.level -= 1
            return True
        return False


@dataclass
class Budget:
    tokens_initial: int
    credits_initial: int
    tokens_remaining: int = -1
    credits_remaining: int = -1
    tokens_settled: int = 0
    credits_settled: int = 0
    tokens_outstanding: int = 0
    credits_outstanding: int = 0

    def __post_init__(self):
        if self.tokens_remaining < 0:
            self.tokens_remaining = self.tokens_initial
        if self.credits_remaining < 0:
            self.credits_remaining = self.credits_initial

    def can_reserve(self, tokens: int, credits: int) -> bool:
        return self.tokens_remaining >= tokens and self.credits_remaining >= credits

    def reserve(self, tokens: int, credits: int) -> None:
        self.tokens_remaining -= tokens
        self.credits_remaining -= credits
        self.tokens_outstanding += tokens
        self.credits_outstanding += credits

    def settle(self, reserved_tokens: int, reserved_credits: int,
               actual_tokens: int, actual_credits: int) -> None:
        self.tokens_remaining += reserved_tokens - actual_tokens
        self.credits_remaining += reserved_credits - actual_credits
        self.tokens_outstanding -= reserved_tokens
        self.credits_outstanding -= reserved_credits
        self.tokens_settled += actual_tokens
        self.credits_settled += actual_credits

    def conserved(self) -> bool:
        return (
            self.tokens_initial - self.tokens_remaining
            == self.tokens_settled + self.tokens_outstanding
            and self.credits_initial - self.credits_remaining
            == self.credits_settled + self.credits_outstanding
        )


@dataclass
class GatewayRequest:
    id: str
    api_key: str
    model: str
    prompt_tokens: int
    max_output_tokens: int
    output_tokens: int  # actual generation length, revealed at completion
    arrival: int = -1
    status: str | None = None
    project: str | None = None
    dispatch: int | None = None
    replica: str | None = None
    ttft_ms: int | None = None
    e2el_ms: int | None = None
    settled: bool = False

    def validate(self) -> list[str]:
        problems = []
        if self.prompt_tokens < 0:
            problems.append("prompt_tokens must be >= 0")
        if self.max_output_tokens < 1:
            problems.append("max_output_tokens must be >= 1")
        if not 1 <= self.output_tokens <= self.max_output_tokens:
            problems.append("output_tokens must be in [1, max_output_tokens]")
        return problems


def prefill_ms(profile: ModelProfile, prompt_tokens: int) -> int:
    exact = Fraction(str(profile.prefill_per_token_ms)) * prompt_tokens
    return int(exact + Fraction(1, 2))


def service_ms(profile: ModelProfile, prompt_tokens: int, output_tokens: int) -> int:
    """Active time on a replica: prefill to first token, then decode."""
    return (
        profile.ttft_base_ms
        + prefill_ms(profile, prompt_tokens)
        + (output_tokens - 1) * profile.itl_ms
    )


@dataclass
class Gateway:
    engine: Engine
    service: ServicePlane
    profiles: dict[str, ModelProfile]
    projects: dict[str, Project]
    keys: dict[str, ApiKey]
    requests: dict[str, GatewayRequest] = field(default_factory=dict)
    ledger: list[dict] = field(default_factory=list)  # append-only
    budgets: dict[str, Budget] = field(default_factory=dict)
    key_budgets: dict[str, Budget] = field(default_factory=dict)
    queues: dict[str, deque] = field(default_factory=dict)
    in_flight: dict[str, int] = field(default_factory=dict)  # replica id -> count
    _buckets: dict[str, TokenBucket] = field(default_factory=dict)
    _dispatch_waits: list[tuple[int, str, int]] = field(default_factory=list)

    def __post_init__(self):
        self.engine.on(EventKind.REQUEST_ARRIVAL, self._on_arrival)
        self.engine.on(EventKind.REQUEST_COMPLETE, self._on_complete)
        self.service.run_hooks.append(self._on_replica_running)
        for pid, project in self.projects.items():
            self.budgets[pid] = Budget(project.token_budget, project.credit_budget)
        for key_id, key in self.keys.items():
            if key.per_key_budget is not None:
                # key budgets are token-only; credits are a project concern
                self.key_budgets[key_id] = Budget(key.per_key_budget, 0)

    # --- submission ---

    def submit(self, req: GatewayRequest, at: int | None = None) -> None:
        problems = req.validate()
        if problems:
            raise ValueError(f"request {req.id}: " + "; ".join(problems))
        if req.id in self.requests:
            raise ValueError(f"duplicate request id {req.id}")
        self.requests[req.id] = req
        when = self.engine.clock if at is None else max(at, self.engine.clock)
        self.engine.schedule(when, EventKind.REQUEST_ARRIVAL, {"request": req.id})

    # --- admission ---

    def _admit(self, req: GatewayRequest, now: int) -> str:
        key = self.keys.get(req.api_key)
        if key is None or (key.expiry is not None and now >= key.expiry):
            return UNAUTHORIZED
        project = self.projects.get(key.project_id)
        if project is None:
            return UNAUTHORIZED
        req.project = project.id
        if req.model not in project.allowed_models or req.model not in self.profiles:
            return FORBIDDEN_MODEL
        if project.rate_limit is not None:
            bucket = self._buckets.get(req.api_key)
            if bucket is None:
                bucket = TokenBucket.from_spec(project.rate_limit, now)
                self._buckets[req.api_key] = bucket
            if not bucket.take(now):
                return RATE_LIMITED
        profile = self.profiles[req.model]
        reserve_tokens = req.prompt_tokens + req.max_output_tokens
        reserve_credits = token_cost(reserve_tokens, profile)
        budget = self.budgets[project.id]
        key_budget = self.key_budgets.get(req.api_key)
        if not budget.can_reserve(reserve_tokens, reserve_credits):
            return OVER_BUDGET
        if key_budget is not None and not key_budget.can_reserve(reserve_tokens, 0):
            return OVER_BUDGET
        budget.reserve(reserve_tokens, reserve_credits)
        if key_budget is not None:
            key_budget.reserve(reserve_tokens, 0)
        return OK

    def _on_arrival(self, event) -> None:
        req = self.requests[event.payload["request"]]
        req.arrival = event.time
        status = self._admit(req, event.time)
        req.status = status
        if status is not OK:
            return
        self.queues.setdefault(req.model, deque()).append(req.id)
        self._pump(req.model, event.time)

    # --- routing ---

    def _pick_replica(self, model: str) -> Replica | None:
        profile = self.profiles[model]
        best = None
        best_load = None
        for rep in self.service.running(model):
            load = self.in_flight.get(rep.id, 0)
            if load >= profile.max_concurrent:
                continue
            if best_load is None or load < best_load:
                best, best_load = rep, load
        return best

    def _pump(self, model: str, now: int) -> None:
        queue = self.queues.get(model)
        while queue:
            rep = self._pick_replica(model)
            if rep is None:
                return
            req = self.requests[queue.popleft()]
            self._dispatch(req, rep, now)

    def _dispatch(self, req: GatewayRequest, rep: Replica, now: int) -> None:
        profile = self.profiles[req.model]
        wait = now - req.arrival
        req.dispatch = now
        req.replica = rep.id
        req.ttft_ms = wait + profile.ttft_base_ms + prefill_ms(profile, req.prompt_tokens)
        req.e2el_ms = req.ttft_ms + (req.output_tokens - 1) * profile.itl_ms
        self.in_flight[rep.id] = self.in_flight.get(rep.id, 0) + 1
        self._dispatch_waits.append((now, req.model, wait))
        self.engine.schedule(
            now + service_ms(profile, req.prompt_tokens, req.output_tokens),
            EventKind.REQUEST_COMPLETE,
            {"request": req.id, "replica": rep.id},
        )

    def _on_replica_running(self, rep: Replica, t: int) -> None:
        self._pump(rep.model, t)

    # --- settlement ---

    def _on_complete(self, event) -> None:
        req = self.requests[event.payload["request"]]
        self._settle(req, event.time)
        rep_id = event.payload["replica"]
        if rep_id in self.in_flight:
            self.in_flight[rep_id] -= 1
            if self.in_flight[rep_id] == 0:
                del self.in_flight[rep_id]
        self._pump(req.model, event.time)

    def _settle(self, req: GatewayRequest, now: int) -> None:
        if req.settled:
            raise DoubleSettle(f"request {req.id} settled twice")
        req.settled = True
        profile = self.profiles[req.model]
        reserved_tokens = req.prompt_tokens + req.max_output_tokens
        reserved_credits = token_cost(reserved_tokens, profile)
        actual_tokens = req.prompt_tokens + req.output_tokens
        actual_credits = token_cost(actual_tokens, profile)
        self.budgets[req.project].settle(
            reserved_tokens, reserved_credits, actual_tokens, actual_credits
        )
        key_budget = self.key_budgets.get(req.api_key)
        if key_budget is not None:
            key_budget.settle(reserved_tokens, 0, actual_tokens, 0)
        self.ledger.append(
            {
                "t": now,
                "request": req.id,
                "project": req.project,
                "model": req.model,
                "prompt_tokens": req.prompt_tokens,
                "output_tokens": req.output_tokens,
                "tokens_charged": actual_tokens,
                "credits_charged": actual_credits,
            }
        )

    # --- views ---

    def usage(self, project_id: str) -> dict:
        budget = self.budgets[project_id]
        rows = [e for e in self.ledger if e["project"] == project_id]
        return {
            "project": project_id,
            "requests_settled": len(rows),
            "tokens": {
                "initial": budget.tokens_initial,
                "remaining": budget.tokens_remaining,
                "settled": budget.tokens_settled,
                "outstanding": budget.tokens_outstanding,
            },
            "credits": {
                "initial": budget.credits_initial,
                "remaining": budget.credits_remaining,
                "settled": budget.credits_settled,
                "outstanding": budget.credits_outstanding,
            },
        }

    def pool_snapshot(self, model: str) -> dict:
        profile = self.profiles[model]
        reps = self.service.running(model)
        flying = sum(self.in_flight.get(r.id, 0) for r in reps)
        return {
            "model": model,
            "replicas": len(reps),
            "in_flight": flying,
            "capacity": len(reps) * profile.max_concurrent,
            "queued": len(self.queues.get(model, ())),
        }

    def window_queue_waits(self, model: str, since: int, now: int) -> list[int]:
        """Queue waits of requests dispatched in [since, now)."""
        return [
            wait
            for t, m, wait in self._dispatch_waits
            if m == model and since <= t < now
        ]

    def outcomes(self) -> list[dict]:
        rows = []
        for req in self.requests.values():
            if req.status is None:
                continue  # still scheduled for arrival
            rows.append(
                {
                    "id": req.id,
                    "t": req.arrival,
                    "project": req.project,
                    "model": req.model,
                    "status": req.status,
                    "prompt_tokens": req.prompt_tokens,
                    "max_output_tokens": req.max_output_tokens,
                    "output_tokens": req.output_tokens if req.status == OK else 0,
                    "dispatch": req.dispatch,
                    "replica": req.replica,
                    "ttft_ms": req.ttft_ms,
                    "e2el_ms": req.e2el_ms,
                }
            )
        rows.sort(key=lambda r: (r["t"], r["id"]))
        return rows
