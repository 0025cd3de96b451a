"""Scenario files: YAML in, fully typed and cross-checked configuration out.

A scenario is deep-merged over the packaged defaults (dicts merge key by
key, everything else is replaced), then every section is parsed into the
domain types and every cross-reference is resolved. Validation is total:
all problems in a file are collected and reported in one ConfigError, not
just the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import yaml

from .batch import BatchJob, CommClass
from .bridge import Recipe, RecipeKind, RetentionPolicy
from .core import (
    ApiKey,
    Detached,
    JoinedBatch,
    JoinedService,
    ModelProfile,
    NetworkPath,
    NetworkPathKind,
    Node,
    NodeFlavour,
    Project,
    RateLimitSpec,
)
from .elastic import DemandPolicyConfig, SchedulePolicyConfig, ScheduleWindow
from .errors import ConfigError
from .lifecycle import MaintenanceWindow, TransitionSpec
from .workload import (
    DiurnalRate,
    FinetuneTrafficSpec,
    LongTailInt,
    TrafficSpec,
    TriangularInt,
)

_FLAVOURS = {f.value: f for f in NodeFlavour}
_PATH_KINDS = {k.value: k for k in NetworkPathKind}
_RECIPE_KINDS = {k.value: k for k in RecipeKind}


@dataclass
class ElasticConfig:
    enabled: bool = False
    policy: str = "demand"
    cluster: str = "infer"
    interval_ms: int = 60_000
    demand: DemandPolicyConfig = DemandPolicyConfig()
    schedule: SchedulePolicyConfig = SchedulePolicyConfig()


@dataclass
class Scenario:
    name: str
    horizon_ms: int
    seed: int
    transition: TransitionSpec
    fetch_bw_gbps: float
    operators: frozenset[str]
    nodes: list[Node]
    profiles: dict[str, ModelProfile]
    projects: dict[str, Project]
    keys: dict[str, ApiKey]
    deployments: list[dict]  # deployment fields; service.Deployment built per run
    changes: list[dict]
    traffic: list[TrafficSpec]
    batch_jobs: list[tuple[int, BatchJob]]
    recipes: list[Recipe]
    finetune_traffic: list[FinetuneTrafficSpec]
    finetune_submissions: list[dict]
    elastic: ElasticConfig
    reconcile_interval_ms: int
    maintenance: list[MaintenanceWindow]
    retention: RetentionPolicy | None
    raw: dict = field(repr=False, default_factory=dict)


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_defaults() -> dict:
    text = resources.files("planesim").joinpath("data/defaults.yaml").read_text()
    return yaml.safe_load(text)


def _parse_network(entries, errors, ctx) -> tuple[NetworkPath, ...]:
    paths = []
    for entry in entries or []:
        if isinstance(entry, str):
            kind_name, lanes = entry, None
        else:
            kind_name, lanes = entry.get("kind"), entry.get("lanes")
        kind = _PATH_KINDS.get(kind_name)
        if kind is None:
            errors.append(f"{ctx}: unknown network path {kind_name!r}")
            continue
        if lanes is None:
            lanes = 4 if kind is NetworkPathKind.HSN_TCP_MULTI else 1
        try:
            paths.append(NetworkPath(kind, lanes=lanes))
        except ValueError as exc:
            errors.append(f"{ctx}: {exc}")
    return tuple(paths)


def _parse_nodes(entries, errors) -> list[Node]:
    nodes = []
    seen = set()
    for entry in entries or []:
        nid = entry.get("id", "?")
        ctx = f"node {nid}"
        if nid in seen:
            errors.append(f"{ctx}: duplicate id")
            continue
        seen.add(nid)
        flavour = _FLAVOURS.get(entry.get("flavour", "hpc-diskless"))
        if flavour is None:
            errors.append(f"{ctx}: unknown flavour {entry.get('flavour')!r}")
            continue
        plane = entry.get("plane", "service")
        if plane == "batch":
            state = JoinedBatch()
        elif plane == "service":
            state = JoinedService(entry.get("cluster", "infer"))
        elif plane == "detached":
            state = Detached()
        else:
            errors.append(f"{ctx}: unknown plane {plane!r}")
            continue
        try:
            nodes.append(
                Node(
                    id=nid,
                    flavour=flavour,
                    gpus=entry.get("gpus", 0),
                    gpu_mem_gb=float(entry.get("gpu_mem_gb", 0.0)),
                    cpu_cores=entry.get("cpu_cores", 0),
                    network_paths=_parse_network(entry.get("network"), errors, ctx),
                    labels=frozenset(entry.get("labels", [])),
                    taints=frozenset(entry.get("taints", [])),
                    state=state,
                )
            )
        except ValueError as exc:
            errors.append(f"{ctx}: {exc}")
    return nodes


def _parse_models(entries, errors) -> dict[str, ModelProfile]:
    profiles = {}
    for entry in entries or []:
        name = entry.get("name", "?")
        if name in profiles:
            errors.append(f"model {name}: duplicate name")
            continue
        try:
            profiles[name] = ModelProfile(
                name=name,
                params_b=float(entry.get("params_b", 0.0)),
                weights_gb=float(entry["weights_gb"]),
                gpus_required=entry["gpus_required"],
                max_concurrent=entry["max_concurrent"],
                ttft_base_ms=entry["ttft_base_ms"],
                prefill_per_token_ms=float(entry["prefill_per_token_ms"]),
                itl_ms=entry["itl_ms"],
                cost_per_1k_tokens=float(entry["cost_per_1k_tokens"]),
                hot=bool(entry.get("hot", False)),
                max_context=entry.get("max_context", 8192),
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"model {name}: {exc!r}")
    return profiles


def _parse_projects(entries, errors):
    projects: dict[str, Project] = {}
    keys: dict[str, ApiKey] = {}
    for entry in entries or []:
        pid = entry.get("id", "?")
        ctx = f"project {pid}"
        if pid in projects:
            errors.append(f"{ctx}: duplicate id")
            continue
        limit = None
        if entry.get("rate_limit") is not None:
            spec = entry["rate_limit"]
            try:
                limit = RateLimitSpec(
                    capacity=spec["capacity"], refill_per_s=float(spec["refill_per_s"])
                )
            except (KeyError, ValueError, TypeError) as exc:
                errors.append(f"{ctx}: rate_limit: {exc!r}")
        try:
            projects[pid] = Project(
                id=pid,
                members=frozenset(entry.get("members", [])),
                token_budget=entry.get("token_budget", 0),
                credit_budget=entry.get("credit_budget", 0),
                rate_limit=limit,
                allowed_models=frozenset(entry.get("allowed_models", [])),
            )
        except ValueError as exc:
            errors.append(f"{ctx}: {exc}")
            continue
        for key_entry in entry.get("keys", []):
            key_id = key_entry.get("key", "?")
            if key_id in keys:
                errors.append(f"{ctx}: duplicate api key {key_id!r}")
                continue
            keys[key_id] = ApiKey(
                key=key_id,
                project_id=pid,
                per_key_budget=key_entry.get("per_key_budget"),
                expiry=key_entry.get("expiry"),
            )
    return projects, keys


def _parse_traffic(entries, errors) -> list[TrafficSpec]:
    specs = []
    seen = set()
    for entry in entries or []:
        name = entry.get("name", "?")
        ctx = f"traffic {name}"
        if name in seen:
            errors.append(f"{ctx}: duplicate name")
            continue
        seen.add(name)
        try:
            prompt = entry["prompt"]
            output = entry["output"]
            specs.append(
                TrafficSpec(
                    name=name,
                    rate=DiurnalRate(
                        base_qps=float(entry["base_qps"]),
                        amplitude=float(entry.get("amplitude", 0.0)),
                        peak_hour=float(entry.get("peak_hour", 14.0)),
                    ),
                    model_weights=dict(entry["models"]),
                    key_weights=dict(entry["keys"]),
                    prompt=TriangularInt(prompt["lo"], prompt["mode"], prompt["hi"]),
                    output=LongTailInt(
                        TriangularInt(output["lo"], output["mode"], output["hi"]),
                        p_tail=float(output.get("p_tail", 0.0)),
                        tail_lo=output.get("tail_lo", 0),
                        tail_hi=output.get("tail_hi", 0),
                    ),
                    max_output_factor=float(entry.get("max_output_factor", 1.25)),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"{ctx}: {exc!r}")
    return specs


def _parse_batch_jobs(entries, errors) -> list[tuple[int, BatchJob]]:
    jobs = []
    seen = set()
    for entry in entries or []:
        jid = entry.get("id", "?")
        ctx = f"batch job {jid}"
        if jid in seen:
            errors.append(f"{ctx}: duplicate id")
            continue
        seen.add(jid)
        comm = entry.get("comm_class", "small")
        if comm not in ("small", "large"):
            errors.append(f"{ctx}: unknown comm_class {comm!r}")
            continue
        try:
            job = BatchJob(
                id=jid,
                project=entry.get("project", "default"),
                nodes_requested=entry["nodes"],
                walltime_ms=entry["walltime_ms"],
                base_runtime_ms=entry["base_runtime_ms"],
                comm_class=CommClass(comm),
            )
            job.validate()
            jobs.append((entry.get("at_ms", 0), job))
        except (KeyError, TypeError) as exc:
            errors.append(f"{ctx}: {exc!r}")
        except Exception as exc:  # InvalidJob carries the detail
            errors.append(f"{ctx}: {exc}")
    return jobs


def _parse_recipes(entries, errors) -> list[Recipe]:
    recipes = []
    seen = set()
    for entry in entries or []:
        name = entry.get("name", "?")
        ctx = f"recipe {name}"
        if name in seen:
            errors.append(f"{ctx}: duplicate name")
            continue
        seen.add(name)
        kind = _RECIPE_KINDS.get(entry.get("kind"))
        if kind is None:
            errors.append(f"{ctx}: unknown kind {entry.get('kind')!r}")
            continue
        try:
            recipes.append(
                Recipe(
                    name=name,
                    kind=kind,
                    base_model=entry["base_model"],
                    nodes=entry["nodes"],
                    epochs=entry["epochs"],
                    est_ms_per_epoch=entry["est_ms_per_epoch"],
                    checkpoint_every=entry.get("checkpoint_every", 1),
                    lora_rank=entry.get("lora_rank", 16),
                    adapter_gb=float(entry.get("adapter_gb", 1.0)),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"{ctx}: {exc!r}")
    return recipes


def _parse_elastic(cfg, errors) -> ElasticConfig:
    policy = cfg.get("policy", "demand")
    if policy not in ("demand", "schedule"):
        errors.append(f"elastic: unknown policy {policy!r}")
        policy = "demand"
    demand_cfg = cfg.get("demand", {})
    schedule_cfg = cfg.get("schedule", {})
    windows = []
    for w in schedule_cfg.get("windows", []):
        try:
            windows.append(
                ScheduleWindow(w["start_hour"], w["end_hour"], w["delta_nodes"])
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"elastic: schedule window: {exc!r}")
    try:
        demand = DemandPolicyConfig(
            queue_wait_p99_ms=demand_cfg.get("queue_wait_p99_ms", 5_000),
            util_release_threshold=float(demand_cfg.get("util_release_threshold", 0.3)),
            windows_up=demand_cfg.get("windows_up", 2),
            windows_down=demand_cfg.get("windows_down", 3),
            cooldown_ms=demand_cfg.get("cooldown_ms", 600_000),
            max_delta_nodes=demand_cfg.get("max_delta_nodes", 4),
        )
    except (ValueError, TypeError) as exc:
        errors.append(f"elastic: demand: {exc!r}")
        demand = DemandPolicyConfig()
    return ElasticConfig(
        enabled=bool(cfg.get("enabled", False)),
        policy=policy,
        cluster=cfg.get("cluster", "infer"),
        interval_ms=cfg.get("interval_ms", 60_000),
        demand=demand,
        schedule=SchedulePolicyConfig(
            windows=tuple(windows), cooldown_ms=schedule_cfg.get("cooldown_ms", 0)
        ),
    )


def _cross_check(s: Scenario, errors: list[str]) -> None:
    node_ids = {n.id for n in s.nodes}
    deployment_ids = set()
    for dep in s.deployments:
        did = dep.get("id", "?")
        if did in deployment_ids:
            errors.append(f"deployment {did}: duplicate id")
        deployment_ids.add(did)
        if dep.get("model") not in s.profiles:
            errors.append(f"deployment {did}: unknown model {dep.get('model')!r}")
        if dep.get("project") not in s.projects:
            errors.append(f"deployment {did}: unknown project {dep.get('project')!r}")
        if dep.get("replicas", 0) < 0:
            errors.append(f"deployment {did}: replicas must be >= 0")
    for change in s.changes:
        if change.get("deployment") not in deployment_ids:
            errors.append(
                f"change at {change.get('at_ms')}: unknown deployment "
                f"{change.get('deployment')!r}"
            )
        if change.get("replicas", 0) < 0:
            errors.append(f"change at {change.get('at_ms')}: replicas must be >= 0")
    for spec in s.traffic:
        for model in spec.model_weights:
            if model not in s.profiles:
                errors.append(f"traffic {spec.name}: unknown model {model!r}")
        for key in spec.key_weights:
            if key not in s.keys:
                errors.append(f"traffic {spec.name}: unknown api key {key!r}")
    for project in s.projects.values():
        for model in project.allowed_models:
            if model not in s.profiles:
                errors.append(f"project {project.id}: unknown allowed model {model!r}")
    for recipe in s.recipes:
        if recipe.base_model not in s.profiles:
            errors.append(f"recipe {recipe.name}: unknown base model {recipe.base_model!r}")
    recipe_names = {r.name for r in s.recipes}
    for ft in s.finetune_traffic:
        for name in ft.recipe_weights:
            if name not in recipe_names:
                errors.append(f"finetune traffic {ft.name}: unknown recipe {name!r}")
        for pid in ft.project_weights:
            if pid not in s.projects:
                errors.append(f"finetune traffic {ft.name}: unknown project {pid!r}")
    for sub in s.finetune_submissions:
        if sub.get("recipe") not in recipe_names:
            errors.append(
                f"finetune submission at {sub.get('at_ms')}: unknown recipe "
                f"{sub.get('recipe')!r}"
            )
        if sub.get("project") not in s.projects:
            errors.append(
                f"finetune submission at {sub.get('at_ms')}: unknown project "
                f"{sub.get('project')!r}"
            )
    for window in s.maintenance:
        if window.node_id not in node_ids:
            errors.append(f"maintenance window: unknown node {window.node_id!r}")
        if window.authorized_by not in s.operators:
            errors.append(
                f"maintenance window on {window.node_id}: operator "
                f"{window.authorized_by!r} not in operators list"
            )
        if not window.start < window.end:
            errors.append(
                f"maintenance window on {window.node_id}: start must be before end"
            )
    if s.horizon_ms <= 0:
        errors.append("horizon_ms must be > 0")


def load_scenario(path: str | Path, seed: int | None = None) -> Scenario:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"scenario file not found: {path}")
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"scenario {path} must be a mapping")
    cfg = _merge(load_defaults(), raw)

    errors: list[str] = []
    transition_cfg = cfg.get("transition", {})
    try:
        transition = TransitionSpec(
            reboot_ms=transition_cfg.get("reboot_ms", 600_000),
            join_ms=transition_cfg.get("join_ms", 120_000),
            detach_ms=transition_cfg.get("detach_ms", 60_000),
        )
    except (ValueError, TypeError) as exc:
        errors.append(f"transition: {exc!r}")
        transition = TransitionSpec()

    projects, keys = _parse_projects(cfg.get("projects"), errors)
    maintenance = []
    for entry in cfg.get("maintenance") or []:
        maintenance.append(
            MaintenanceWindow(
                node_id=entry.get("node", "?"),
                start=entry.get("start_ms", 0),
                end=entry.get("end_ms", 0),
                authorized_by=entry.get("authorized_by", "?"),
                reason=entry.get("reason", ""),
            )
        )
    retention = None
    if cfg.get("retention") is not None:
        ret = cfg["retention"]
        try:
            retention = RetentionPolicy(
                keep_newest=ret["keep_newest"], min_age_ms=ret.get("min_age_ms", 0)
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"retention: {exc!r}")

    ft_traffic = []
    for entry in cfg.get("finetune_traffic") or []:
        try:
            ft_traffic.append(
                FinetuneTrafficSpec(
                    name=entry["name"],
                    per_day=float(entry["per_day"]),
                    recipe_weights=dict(entry["recipes"]),
                    project_weights=dict(entry.get("projects", {"default": 1.0})),
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            errors.append(f"finetune traffic: {exc!r}")

    scenario = Scenario(
        name=cfg.get("name", path.stem),
        horizon_ms=cfg.get("horizon_ms", 3_600_000),
        seed=cfg.get("seed", 0) if seed is None else seed,
        transition=transition,
        fetch_bw_gbps=float(cfg.get("fetch_bw_gbps", 2.0)),
        operators=frozenset(cfg.get("operators") or []),
        nodes=_parse_nodes(cfg.get("nodes"), errors),
        profiles=_parse_models(cfg.get("models"), errors),
        projects=projects,
        keys=keys,
        deployments=list(cfg.get("deployments") or []),
        changes=sorted(cfg.get("changes") or [], key=lambda c: c.get("at_ms", 0)),
        traffic=_parse_traffic(cfg.get("traffic"), errors),
        batch_jobs=_parse_batch_jobs(cfg.get("batch_jobs"), errors),
        recipes=_parse_recipes(cfg.get("recipes"), errors),
        finetune_traffic=ft_traffic,
        finetune_submissions=list(cfg.get("finetune_submissions") or []),
        elastic=_parse_elastic(cfg.get("elastic", {}), errors),
        reconcile_interval_ms=cfg.get("reconcile_interval_ms", 30_000),
        maintenance=maintenance,
        retention=retention,
        raw=cfg,
    )
    _cross_check(scenario, errors)
    if errors:
        raise ConfigError(errors)
    return scenario
