"""Synthetic workload: diurnal request arrivals and fine-tune submissions.

Arrivals follow an inhomogeneous Poisson process with a cosine day shape,
sampled by thinning: candidates are drawn at the peak rate and accepted
with probability rate(t)/peak. Token counts come from triangular integer
distributions, the output side with an optional uniform long tail standing
in for the occasional very long generation. Everything is driven by named
RNG streams derived from the run seed, so two runs with the same seed
produce byte-identical arrival lists regardless of module import order.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

from .engine import derive_seed

DAY_MS = 86_400_000


@dataclass(frozen=True)
class DiurnalRate:
    base_qps: float
    amplitude: float = 0.0
    peak_hour: float = 14.0

    def __post_init__(self):
        if self.base_qps <= 0:
            raise ValueError("base_qps must be > 0")
        if not 0 <= self.amplitude < 1:
            raise ValueError("amplitude must be in [0, 1)")

    def rate(self, t_ms: int) -> float:
        """Requests per second at simulated time t."""
        phase = 2 * math.pi * (t_ms - self.peak_hour * 3_600_000) / DAY_MS
        return self.base_qps * (1 + self.amplitude * math.cos(phase))

    @property
    def peak_qps(self) -> float:
        return self.base_qps * (1 + self.amplitude)


@dataclass(frozen=True)
class TriangularInt:
    lo: int
    mode: int
    hi: int

    def __post_init__(self):
        if not self.lo <= self.mode <= self.hi:
            raise ValueError("need lo <= mode <= hi")

    def sample(self, rng: random.Random) -> int:
        value = int(round(rng.triangular(self.lo, self.hi, self.mode)))
        return min(self.hi, max(self.lo, value))


@dataclass(frozen=True)
class LongTailInt:
    body: TriangularInt
    p_tail: float = 0.0
    tail_lo: int = 0
    tail_hi: int = 0

    def __post_init__(self):
        if not 0 <= self.p_tail < 1:
            raise ValueError("p_tail must be in [0, 1)")
        if self.p_tail > 0 and not 0 < self.tail_lo <= self.tail_hi:
            raise ValueError("tail bounds must satisfy 0 < lo <= hi")

    def sample(self, rng: random.Random) -> int:
        if self.p_tail > 0 and rng.random() < self.p_tail:
            return rng.randint(self.tail_lo, self.tail_hi)
        return self.body.sample(rng)

    def mean(self) -> float:
        body_mean = (self.body.lo + self.body.mode + self.body.hi) / 3
        tail_mean = (self.tail_lo + self.tail_hi) / 2
        return (1 - self.p_tail) * body_mean + self.p_tail * tail_mean


def weighted_choice(rng: random.Random, weights: dict[str, float]) -> str:
    """Deterministic weighted pick: cumulative scan over sorted keys."""
    total = sum(weights.values())
    if total <= 0:
        raise ValueError("weights must sum to > 0")
    x = rng.random() * total
    acc = 0.0
    keys = sorted(weights)
    for key in keys:
        acc += weights[key]
        if x < acc:
            return key
    return keys[-1]


@dataclass(frozen=True)
class Arrival:
    at: int
    model: str
    api_key: str
    prompt_tokens: int
    output_tokens: int
    max_output_tokens: int

    def to_row(self) -> dict:
        return {
            "at": self.at, "model": self.model, "api_key": self.api_key,
            "prompt_tokens": self.prompt_tokens,
            "output_tokens": self.output_tokens,
            "max_output_tokens": self.max_output_tokens,
        }

    @classmethod
    def from_row(cls, row: dict) -> Arrival:
        return cls(**row)


@dataclass(frozen=True)
class TrafficSpec:
    name: str
    rate: DiurnalRate
    model_weights: dict[str, float]
    key_weights: dict[str, float]
    prompt: TriangularInt
    output: LongTailInt
    max_output_factor: float = 1.25

    def __post_init__(self):
        if self.max_output_factor < 1.0:
            raise ValueError("max_output_factor must be >= 1")


def generate_arrivals(
    spec: TrafficSpec, seed: int, start_ms: int, end_ms: int
) -> list[Arrival]:
    rng = random.Random(derive_seed(seed, f"traffic:{spec.name}"))
    peak_per_ms = spec.rate.peak_qps / 1000
    arrivals: list[Arrival] = []
    t = float(start_ms)
    n = 0
    while True:
        t += rng.expovariate(peak_per_ms)
        if t >= end_ms:
            break
        at = int(t)
        if rng.random() >= spec.rate.rate(at) / spec.rate.peak_qps:
            continue
        model = weighted_choice(rng, spec.model_weights)
        key = weighted_choice(rng, spec.key_weights)
        prompt = spec.prompt.sample(rng)
        out = spec.output.sample(rng)
        max_out = max(out, int(math.ceil(out * spec.max_output_factor)))
        arrivals.append(
            Arrival(
                at=at, model=model, api_key=key, prompt_tokens=prompt,
                output_tokens=out, max_output_tokens=max_out,
            )
        )
        n += 1
    return arrivals


@dataclass(frozen=True)
class FinetuneTrafficSpec:
    name: str
    per_day: float
    recipe_weights: dict[str, float]
    project_weights: dict[str, float] = field(default_factory=lambda: {"default": 1.0})

    def __post_init__(self):
        if self.per_day <= 0:
            raise ValueError("per_day must be > 0")


@dataclass(frozen=True)
class FinetuneSubmission:
    at: int
    recipe: str
    project: str

    def to_row(self) -> dict:
        return {"at": self.at, "recipe": self.recipe, "project": self.project}


def generate_finetune_submissions(
    spec: FinetuneTrafficSpec, seed: int, start_ms: int, end_ms: int
) -> list[FinetuneSubmission]:
    rng = random.Random(derive_seed(seed, f"finetune:{spec.name}"))
    per_ms = spec.per_day / DAY_MS
    out: list[FinetuneSubmission] = []
    t = float(start_ms)
    while True:
        t += rng.expovariate(per_ms)
        if t >= end_ms:
            break
        out.append(
            FinetuneSubmission(
                at=int(t),
                recipe=weighted_choice(rng, spec.recipe_weights),
                project=weighted_choice(rng, spec.project_weights),
            )
        )
    return out
