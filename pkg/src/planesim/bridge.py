"""Fine-tuning bridge: recipes rendered into batch jobs, checkpoints tracked.

A recipe names a base model and a training shape (kind, node count, epochs,
time per epoch). Submission renders it into a batch job with a 20 percent
walltime margin over the estimated runtime, communication class Large
whenever it spans nodes, and hands it to the batch scheduler. Monitoring
reports linear progress between the job's start and its actual end.

When a job completes, checkpoints are registered at every configured epoch
boundary and at the final epoch, timestamped proportionally along the job's
actual runtime. Checkpoints of one base model form a lineage rooted at a
synthetic record for the base weights, which is born referenced so no
retention policy can ever collect it.

Garbage collection is a pure plan: a checkpoint is deleted only if it is
unreferenced, not among the newest keep_newest of its lineage, and at least
min_age_ms old. Ten 140 GB checkpoints with keep_newest=3 and one older one
referenced plan exactly six deletions reclaiming 840 GB.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction

from .batch import BatchJob, BatchScheduler, CommClass, JobState
from .engine import Engine, EventKind
from .errors import UnknownBaseModel, UnknownJob


class RecipeKind(Enum):
    FULL_SFT = "full-sft"
    LORA = "lora"
    CONTEXT_EXTENSION = "context-extension"
    RL = "rl"


@dataclass(frozen=True)
class Recipe:
    name: str
    kind: RecipeKind
    base_model: str
    nodes: int
    epochs: int
    est_ms_per_epoch: int
    checkpoint_every: int = 1
    lora_rank: int = 16
    adapter_gb: float = 1.0

    def __post_init__(self):
        if self.nodes < 1 or self.epochs < 1 or self.est_ms_per_epoch <= 0:
            raise ValueError(f"recipe {self.name}: nodes, epochs, est_ms_per_epoch must be positive")
        if self.checkpoint_every < 1:
            raise ValueError(f"recipe {self.name}: checkpoint_every must be >= 1")


def render_job(recipe: Recipe, job_id: str, project: str) -> BatchJob:
    base = recipe.epochs * recipe.est_ms_per_epoch
    walltime = int(math.ceil(Fraction(12, 10) * base))
    return BatchJob(
        id=job_id,
        project=project,
        nodes_requested=recipe.nodes,
        walltime_ms=walltime,
        base_runtime_ms=base,
        comm_class=CommClass.LARGE if recipe.nodes > 1 else CommClass.SMALL,
    )


def checkpoint_epochs(epochs: int, every: int) -> list[int]:
    """Epoch boundaries that produce a checkpoint; the final epoch always does."""
    marks = list(range(every, epochs + 1, every))
    if not marks or marks[-1] != epochs:
        marks.append(epochs)
    return marks


@dataclass
class Checkpoint:
    id: str
    lineage: str  # base model name at the root
    parent: str | None
    job: str | None
    epoch: int
    created_at: int
    size_gb: float
    referenced: bool = False
    root: bool = False

    def to_row(self) -> dict:
        return {
            "id": self.id, "lineage": self.lineage, "parent": self.parent,
            "job": self.job, "epoch": self.epoch, "created_at": self.created_at,
            "size_gb": self.size_gb, "referenced": self.referenced,
            "root": self.root,
        }

    @classmethod
    def from_row(cls, row: dict) -> Checkpoint:
        return cls(**row)


@dataclass(frozen=True)
class RetentionPolicy:
    keep_newest: int
    min_age_ms: int = 0

    def __post_init__(self):
        if self.keep_newest < 0 or self.min_age_ms < 0:
            raise ValueError("retention fields must be non-negative")


def gc_plan(checkpoints: list[Checkpoint], policy: RetentionPolicy, now: int) -> dict:
    """Deletion plan; never mutates the store and never touches roots."""
    by_lineage: dict[str, list[Checkpoint]] = {}
    for cp in checkpoints:
        by_lineage.setdefault(cp.lineage, []).append(cp)
    delete, keep = [], []
    for lineage in sorted(by_lineage):
        members = [cp for cp in by_lineage[lineage] if not cp.root]
        roots = [cp for cp in by_lineage[lineage] if cp.root]
        keep.extend(cp.id for cp in roots)
        newest = sorted(members, key=lambda c: (-c.created_at, c.id))
        protected = {cp.id for cp in newest[: policy.keep_newest]}
        for cp in sorted(members, key=lambda c: c.id):
            if (
                not cp.referenced
                and cp.id not in protected
                and now - cp.created_at >= policy.min_age_ms
            ):
                delete.append(cp.id)
            else:
                keep.append(cp.id)
    reclaimed = sum(cp.size_gb for cp in checkpoints if cp.id in set(delete))
    return {"delete": delete, "keep": keep, "reclaimed_gb": reclaimed}


@dataclass
class FineTuneBridge:
    engine: Engine
    batch: BatchScheduler
    profiles: dict  # model name -> ModelProfile
    recipes: dict[str, Recipe] = field(default_factory=dict)
    checkpoints: dict[str, Checkpoint] = field(default_factory=dict)
    jobs: dict[str, str] = field(default_factory=dict)  # job id -> recipe name
    _counter: int = 0

    def __post_init__(self):
        self.engine.on(EventKind.JOB_END, self._on_job_end)

    def add_recipe(self, recipe: Recipe) -> None:
        if recipe.base_model not in self.profiles:
            raise UnknownBaseModel(
                f"recipe {recipe.name} trains on unknown base {recipe.base_model!r}"
            )
        self.recipes[recipe.name] = recipe

    def submit(self, recipe_name: str, project: str, at: int | None = None) -> str:
        recipe = self.recipes.get(recipe_name)
        if recipe is None:
            raise UnknownBaseModel(f"no recipe named {recipe_name!r}")
        self._counter += 1
        job_id = f"ft-{self._counter:04d}"
        self.batch.submit(render_job(recipe, job_id, project), at=at)
        self.jobs[job_id] = recipe_name
        self._ensure_root(recipe.base_model)
        return job_id

    def status(self, job_id: str) -> dict:
        if job_id not in self.jobs:
            raise UnknownJob(job_id)
        job = self.batch.jobs[job_id]
        now = self.engine.clock
        if job.state is JobState.QUEUED:
            progress = 0.0
        elif job.state is JobState.RUNNING:
            span = job.end_time - job.start_time
            progress = min(1.0, max(0.0, (now - job.start_time) / span))
        elif job.state is JobState.COMPLETED:
            progress = 1.0
        else:
            progress = 0.0
        return {"job_id": job_id, "state": job.state.value, "progress": progress}

    def cancel(self, job_id: str) -> None:
        if job_id not in self.jobs:
            raise UnknownJob(job_id)
        self.batch.cancel(job_id)

    def mark_referenced(self, checkpoint_id: str, referenced: bool = True) -> None:
        self.checkpoints[checkpoint_id].referenced = referenced

    def plan_gc(self, policy: RetentionPolicy, now: int | None = None) -> dict:
        t = self.engine.clock if now is None else now
        return gc_plan(list(self.checkpoints.values()), policy, t)

    # --- internals ---

    def _ensure_root(self, base_model: str) -> None:
        if base_model in self.checkpoints:
            return
        profile = self.profiles[base_model]
        self.checkpoints[base_model] = Checkpoint(
            id=base_model, lineage=base_model, parent=None, job=None, epoch=0,
            created_at=0, size_gb=profile.weights_gb, referenced=True, root=True,
        )

    def _checkpoint_size(self, recipe: Recipe) -> float:
        if recipe.kind is RecipeKind.LORA:
            return recipe.adapter_gb
        return self.profiles[recipe.base_model].weights_gb

    def _on_job_end(self, event) -> None:
        job_id = event.payload["job"]
        recipe_name = self.jobs.get(job_id)
        if recipe_name is None:
            return
        recipe = self.recipes[recipe_name]
        job = self.batch.jobs[job_id]
        span = job.end_time - job.start_time
        size = self._checkpoint_size(recipe)
        parent = recipe.base_model
        for epoch in checkpoint_epochs(recipe.epochs, recipe.checkpoint_every):
            created = job.start_time + int(
                Fraction(span) * epoch / recipe.epochs + Fraction(1, 2)
            )
            cp = Checkpoint(
                id=f"{job_id}/ep{epoch}",
                lineage=recipe.base_model,
                parent=parent,
                job=job_id,
                epoch=epoch,
                created_at=created,
                size_gb=size,
            )
            self.checkpoints[cp.id] = cp
            parent = cp.id
