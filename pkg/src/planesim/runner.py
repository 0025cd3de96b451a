"""Assemble a scenario into a live simulation and run it to the horizon.

The runner owns the glue that the individual planes deliberately leave out:
node state observers (evictions, requeues, reconciles on membership
change), the periodic reconcile tick, timed desired-state changes, traffic
pre-generation, and the elastic poller. Everything it does goes through
the engine, so two runs of the same scenario and seed produce the same
trace byte for byte.

Artifacts written per run:

    run.json            scenario name, seed, horizon
    summary.json        roll-up of the whole run (see summarize)
    trace.tsv           the deterministic event trace
    arrivals.jsonl      generated inference traffic, one row per request
    requests.jsonl      gateway outcome per request
    ledger.jsonl        append-only usage ledger rows
    jobs.jsonl          batch job records, including fine-tune renders
    transitions.jsonl   node state changes
    decisions.jsonl     elastic poller decisions
    checkpoints.jsonl   fine-tune checkpoint registry
    timeline.csv        GPU capacity segments (start, end, allocated, available)
    speedup.txt         per-path runtimes of completed multi-node jobs
"""

from __future__ import annotations

import copy
import json
from collections import Counter
from dataclasses import replace
from hashlib import blake2b
from pathlib import Path

from .batch import BatchScheduler, CommClass, JobState
from .bridge import FineTuneBridge
from .core import JoinedBatch, JoinedService, Maintenance, token_cost
from .elastic import ScalePoller, baseline_floor
from .engine import Engine, EventKind, export_trace
from .errors import MissingBaseline
from .gateway import OK, Gateway, GatewayRequest, percentile
from .lifecycle import NodeLifecycle
from .scenario import Scenario, load_scenario
from .service import Deployment, ServicePlane
from .workload import generate_arrivals, generate_finetune_submissions


class SimRun:
    """A fully wired simulation, ready to run once."""

    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.horizon = scenario.horizon_ms
        self.reconcile_interval_ms = scenario.reconcile_interval_ms
        self.engine = Engine(seed=scenario.seed)
        self.lifecycle = NodeLifecycle(
            self.engine, spec=scenario.transition, operators=scenario.operators
        )
        for node in copy.deepcopy(scenario.nodes):
            self.lifecycle.add_node(node)
        nodes = self.lifecycle.nodes
        self.batch = BatchScheduler(self.engine, nodes)
        self.service = ServicePlane(
            self.engine, nodes, scenario.profiles, fetch_bw_gbps=scenario.fetch_bw_gbps
        )
        self.gateway = Gateway(
            self.engine, self.service, scenario.profiles,
            scenario.projects, scenario.keys,
        )
        self.bridge = FineTuneBridge(self.engine, self.batch, scenario.profiles)
        for recipe in scenario.recipes:
            self.bridge.add_recipe(recipe)
        self.lifecycle.pre_observers.append(
            lambda node, old, new, t: self.service.touch(t)
        )
        self.lifecycle.observers.append(self._on_node_state)
        self.engine.on(EventKind.RECONCILE_TICK, self._on_reconcile)

        self.poller: ScalePoller | None = None
        if scenario.elastic.enabled:
            self.poller = ScalePoller(
                self.engine, self.lifecycle, self.batch, self.service, self.gateway,
                cluster=scenario.elastic.cluster,
                policy=scenario.elastic.policy,
                demand_cfg=scenario.elastic.demand,
                schedule_cfg=scenario.elastic.schedule,
                interval_ms=scenario.elastic.interval_ms,
            )
            self.poller.start(self.horizon)

        self.arrivals: list[dict] = []
        self.records: list = []
        self._seed_work()

    # --- wiring ---

    def _on_node_state(self, node, old, new, t) -> None:
        if isinstance(old, JoinedService) and not isinstance(new, JoinedService):
            self.service.evict_node(node.id, t)
        if isinstance(new, Maintenance):
            self.batch.handle_node_loss(node.id, t)
        if isinstance(new, JoinedBatch):
            self.batch.node_available(t)
        if isinstance(new, JoinedService):
            self.service.reconcile(t)

    def _on_reconcile(self, event) -> None:
        change = event.payload.get("change")
        if change is not None:
            dep = self.service.deployments.get(change["deployment"])
            if dep is not None:
                self.service.apply(replace(dep, replicas=change["replicas"]))
        self.service.reconcile(event.time)
        if event.payload.get("periodic"):
            nxt = event.time + self.reconcile_interval_ms
            if nxt <= self.horizon:
                self.engine.schedule(nxt, EventKind.RECONCILE_TICK, {"periodic": True})

    def _check_baseline(self) -> None:
        """The always-on replica set must fit on the initial service nodes."""
        by_cluster: dict[str, list] = {}
        for dep in self.scenario.deployments:
            cluster = dep.get("cluster", "infer")
            profile = self.scenario.profiles[dep["model"]]
            by_cluster.setdefault(cluster, []).extend(
                [profile] * dep.get("replicas", 0)
            )
        for cluster, wanted in by_cluster.items():
            if not wanted:
                continue
            members = [
                n for n in self.lifecycle.nodes.values()
                if isinstance(n.state, JoinedService) and n.state.cluster == cluster
            ]
            if not members:
                raise MissingBaseline(
                    f"cluster {cluster!r} has baseline replicas but no service nodes"
                )
            floor = baseline_floor(wanted, min(n.gpus for n in members))
            if floor > len(members):
                raise MissingBaseline(
                    f"cluster {cluster!r} baseline needs {floor} nodes, "
                    f"has {len(members)}"
                )

    def _seed_work(self) -> None:
        scenario = self.scenario
        self._check_baseline()
        for dep in scenario.deployments:
            self.service.apply(
                Deployment(
                    id=dep["id"],
                    project=dep["project"],
                    model=dep["model"],
                    replicas=dep.get("replicas", 0),
                    cluster=dep.get("cluster", "infer"),
                    required_labels=frozenset(dep.get("required_labels", [])),
                    tolerated_taints=frozenset(dep.get("tolerated_taints", [])),
                )
            )
        self.engine.schedule(0, EventKind.RECONCILE_TICK, {"periodic": True})
        for change in scenario.changes:
            if change["at_ms"] <= self.horizon:
                self.engine.schedule(
                    change["at_ms"], EventKind.RECONCILE_TICK, {"change": change}
                )
        for window in scenario.maintenance:
            self.lifecycle.schedule_maintenance(window)
        for at, job in scenario.batch_jobs:
            self.batch.submit(copy.deepcopy(job), at=at)

        merged = []
        for i, spec in enumerate(scenario.traffic):
            for j, arrival in enumerate(
                generate_arrivals(spec, scenario.seed, 0, self.horizon)
            ):
                merged.append((arrival.at, i, j, spec.name, arrival))
        merged.sort(key=lambda item: item[:3])
        for n, (_, _, _, name, arrival) in enumerate(merged, start=1):
            req_id = f"req-{n:06d}"
            self.arrivals.append({"id": req_id, "spec": name, **arrival.to_row()})
            self.gateway.submit(
                GatewayRequest(
                    id=req_id,
                    api_key=arrival.api_key,
                    model=arrival.model,
                    prompt_tokens=arrival.prompt_tokens,
                    max_output_tokens=arrival.max_output_tokens,
                    output_tokens=arrival.output_tokens,
                ),
                at=arrival.at,
            )

        submissions = [
            (sub["at_ms"], sub["recipe"], sub["project"])
            for sub in scenario.finetune_submissions
        ]
        for spec in scenario.finetune_traffic:
            submissions.extend(
                (sub.at, sub.recipe, sub.project)
                for sub in generate_finetune_submissions(
                    spec, scenario.seed, 0, self.horizon
                )
            )
        for at, recipe, project in sorted(submissions):
            self.bridge.submit(recipe, project, at=at)

    # --- execution ---

    def run(self) -> dict:
        self.records = self.engine.run_until(self.horizon)
        self.service.touch(self.horizon)
        return summarize(self)


def _stats(values) -> dict | None:
    if not values:
        return None
    return {f"p{p}": percentile(values, p) for p in (50, 95, 99)}


def _reservation(req: GatewayRequest, profiles) -> tuple[int, int]:
    if req.status != OK:
        return 0, 0
    tokens = req.prompt_tokens + req.max_output_tokens
    return tokens, token_cost(tokens, profiles[req.model])


def summarize(run: SimRun) -> dict:
    """Roll the run up into the summary dict that report recomputes."""
    scenario = run.scenario
    arrived = [r for r in run.gateway.requests.values() if r.status is not None]
    done = [r for r in arrived if r.settled]

    projects: dict[str, dict] = {}
    for row in run.gateway.ledger:
        entry = projects.setdefault(row["project"], {
            "requests_settled": 0, "tokens_charged": 0, "credits_charged": 0,
            "outstanding_tokens": 0, "outstanding_credits": 0,
        })
        entry["requests_settled"] += 1
        entry["tokens_charged"] += row["tokens_charged"]
        entry["credits_charged"] += row["credits_charged"]
    for req in arrived:
        if req.status == OK and not req.settled:
            tokens, credits = _reservation(req, scenario.profiles)
            entry = projects.setdefault(req.project, {
                "requests_settled": 0, "tokens_charged": 0, "credits_charged": 0,
                "outstanding_tokens": 0, "outstanding_credits": 0,
            })
            entry["outstanding_tokens"] += tokens
            entry["outstanding_credits"] += credits

    jobs = list(run.batch.jobs.values())
    finished = [j for j in jobs if j.state is JobState.COMPLETED]
    by_path: dict[str, dict] = {}
    for job in finished:
        entry = by_path.setdefault(job.path.value, {"count": 0, "total_runtime_ms": 0})
        entry["count"] += 1
        entry["total_runtime_ms"] += job.end_time - job.start_time
    ft_ids = set(run.bridge.jobs)

    output_by_model: dict[str, int] = {}
    for req in done:
        output_by_model[req.model] = output_by_model.get(req.model, 0) + req.output_tokens

    alloc, avail = run.service.gpu_time(run.horizon)
    checkpoints = sorted(
        run.bridge.checkpoints.values(), key=lambda c: (c.created_at, c.id)
    )
    decisions = run.poller.decisions if run.poller else []
    action_counts = Counter(d["action"] for d in decisions)
    digest = blake2b(digest_size=8)
    for rec in run.records:
        digest.update((rec.line() + "\n").encode())

    return {
        "scenario": scenario.name,
        "seed": scenario.seed,
        "horizon_ms": run.horizon,
        "requests": {
            "total": len(arrived),
            "by_status": dict(sorted(Counter(r.status for r in arrived).items())),
            "completed": len(done),
        },
        "latency_ms": {
            "ttft": _stats([r.ttft_ms for r in done]),
            "e2el": _stats([r.e2el_ms for r in done]),
            "queue_wait": _stats([r.dispatch - r.arrival for r in done]),
        },
        "tokens": {
            "prompt": sum(r.prompt_tokens for r in done),
            "output": sum(r.output_tokens for r in done),
            "output_by_model": dict(sorted(output_by_model.items())),
        },
        "projects": dict(sorted(projects.items())),
        "batch": {
            "jobs": len(jobs),
            "completed": len(finished),
            "cancelled": sum(1 for j in jobs if j.state is JobState.CANCELLED),
            "queued": sum(1 for j in jobs if j.state is JobState.QUEUED),
            "running": sum(1 for j in jobs if j.state is JobState.RUNNING),
            "requeues": sum(j.requeues for j in jobs),
            "by_path": dict(sorted(by_path.items())),
            "finetune_jobs": len(ft_ids),
            "finetune_completed": sum(
                1 for j in finished if j.id in ft_ids
            ),
        },
        "service": {
            "gpu_ms_allocated": alloc,
            "gpu_ms_available": avail,
            "utilization": round(alloc / avail, 6) if avail else 0.0,
        },
        "transitions": {
            "count": len(run.lifecycle.log),
            "by_state": dict(sorted(Counter(r["to"] for r in run.lifecycle.log).items())),
        },
        "elastic": {
            "decisions": len(decisions),
            "acquire": action_counts.get("acquire", 0),
            "release": action_counts.get("release", 0),
            "hold": action_counts.get("hold", 0),
        },
        "checkpoints": {
            "count": len(checkpoints),
            "total_gb": round(sum(c.size_gb for c in checkpoints), 6),
        },
        "trace": {"events": len(run.records), "digest": digest.hexdigest()},
    }


def _request_rows(run: SimRun) -> list[dict]:
    rows = []
    for req in run.gateway.requests.values():
        if req.status is None:
            continue
        tokens, credits = _reservation(req, run.scenario.profiles)
        rows.append({
            "id": req.id,
            "t": req.arrival,
            "project": req.project,
            "model": req.model,
            "status": req.status,
            "prompt_tokens": req.prompt_tokens,
            "max_output_tokens": req.max_output_tokens,
            "output_tokens": req.output_tokens if req.settled else 0,
            "dispatch": req.dispatch,
            "replica": req.replica,
            "ttft_ms": req.ttft_ms,
            "e2el_ms": req.e2el_ms,
            "completed": req.settled,
            "tokens_reserved": tokens,
            "credits_reserved": credits,
        })
    rows.sort(key=lambda r: (r["t"], r["id"]))
    return rows


def _job_rows(run: SimRun) -> list[dict]:
    rows = []
    for job in run.batch.jobs.values():
        rows.append({
            "id": job.id,
            "project": job.project,
            "source": "finetune" if job.id in run.bridge.jobs else "direct",
            "nodes_requested": job.nodes_requested,
            "walltime_ms": job.walltime_ms,
            "base_runtime_ms": job.base_runtime_ms,
            "comm_class": job.comm_class.value,
            "state": job.state.value,
            "submitted_at": job.submitted_at,
            "start_time": job.start_time,
            "end_time": job.end_time,
            "path": job.path.value if job.path else None,
            "assigned_nodes": list(job.assigned_nodes),
            "requeues": job.requeues,
        })
    rows.sort(key=lambda r: (r["submitted_at"], r["id"]))
    return rows


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _speedup_lines(job_rows: list[dict]) -> list[str]:
    """Completed multi-node jobs, per path: runtime and speedup vs slowest."""
    runtimes: dict[str, list[int]] = {}
    for row in job_rows:
        if row["state"] != "completed" or row["nodes_requested"] < 2:
            continue
        runtimes.setdefault(row["path"], []).append(
            row["end_time"] - row["start_time"]
        )
    if not runtimes:
        return []
    means = {path: sum(v) / len(v) for path, v in runtimes.items()}
    slowest = max(means.values())
    lines = ["path\tmean_runtime_ms\tspeedup"]
    for path in sorted(means, key=means.get, reverse=True):
        lines.append(f"{path}\t{means[path]:.0f}\t{slowest / means[path]:.1f}")
    return lines


def write_artifacts(run: SimRun, summary: dict, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(
        json.dumps(
            {
                "scenario": run.scenario.name,
                "seed": run.scenario.seed,
                "horizon_ms": run.horizon,
            },
            indent=2,
            sort_keys=True,
        )
        + "\n"
    )
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    export_trace(run.records, out / "trace.tsv")
    _write_jsonl(out / "arrivals.jsonl", run.arrivals)
    _write_jsonl(out / "requests.jsonl", _request_rows(run))
    _write_jsonl(out / "ledger.jsonl", run.gateway.ledger)
    job_rows = _job_rows(run)
    _write_jsonl(out / "jobs.jsonl", job_rows)
    _write_jsonl(out / "transitions.jsonl", run.lifecycle.log)
    _write_jsonl(out / "decisions.jsonl", run.poller.decisions if run.poller else [])
    _write_jsonl(
        out / "checkpoints.jsonl",
        [c.to_row() for c in sorted(
            run.bridge.checkpoints.values(), key=lambda c: (c.created_at, c.id)
        )],
    )
    with open(out / "timeline.csv", "w", encoding="utf-8") as fh:
        fh.write("start,end,allocated,available\n")
        for start, end, alloc, avail in run.service.timeline:
            fh.write(f"{start},{end},{alloc},{avail}\n")
    speedup = _speedup_lines(job_rows)
    if speedup:
        (out / "speedup.txt").write_text("\n".join(speedup) + "\n")
    return out


def run_scenario(
    source: str | Path | Scenario,
    out_dir: str | Path | None = None,
    seed: int | None = None,
) -> tuple[SimRun, dict]:
    """Load (if needed), run, and optionally write artifacts."""
    if isinstance(source, Scenario):
        scenario = source if seed is None else replace(source, seed=seed)
    else:
        scenario = load_scenario(source, seed=seed)
    run = SimRun(scenario)
    summary = run.run()
    if out_dir is not None:
        write_artifacts(run, summary, out_dir)
    return run, summary
