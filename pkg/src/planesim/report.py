"""Recompute a run summary from its artifact files alone.

This is the independent half of the reporting contract: the runner rolls
its summary up from live objects, this module rolls the same numbers up
from the files the run left behind. If the two disagree, an artifact is
incomplete or the two code paths have drifted, and verify_summary raises.
"""

from __future__ import annotations

import json
from collections import Counter
from hashlib import blake2b
from pathlib import Path

from .errors import EmptyTrace
from .gateway import percentile


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def _stats(values) -> dict | None:
    if not values:
        return None
    return {f"p{p}": percentile(values, p) for p in (50, 95, 99)}


def trace_digest(path: Path) -> tuple[int, str]:
    digest = blake2b(digest_size=8)
    events = 0
    with open(path, "rb") as fh:
        for line in fh:
            digest.update(line)
            events += 1
    return events, digest.hexdigest()


def compute_summary(out_dir: str | Path) -> dict:
    out = Path(out_dir)
    meta = json.loads((out / "run.json").read_text())
    requests = read_jsonl(out / "requests.jsonl")
    ledger = read_jsonl(out / "ledger.jsonl")
    jobs = read_jsonl(out / "jobs.jsonl")
    transitions = read_jsonl(out / "transitions.jsonl")
    decisions = read_jsonl(out / "decisions.jsonl")
    checkpoints = read_jsonl(out / "checkpoints.jsonl")

    done = [r for r in requests if r["completed"]]
    projects: dict[str, dict] = {}
    for row in ledger:
        entry = projects.setdefault(row["project"], {
            "requests_settled": 0, "tokens_charged": 0, "credits_charged": 0,
            "outstanding_tokens": 0, "outstanding_credits": 0,
        })
        entry["requests_settled"] += 1
        entry["tokens_charged"] += row["tokens_charged"]
        entry["credits_charged"] += row["credits_charged"]
    for row in requests:
        if row["status"] == "ok" and not row["completed"]:
            entry = projects.setdefault(row["project"], {
                "requests_settled": 0, "tokens_charged": 0, "credits_charged": 0,
                "outstanding_tokens": 0, "outstanding_credits": 0,
            })
            entry["outstanding_tokens"] += row["tokens_reserved"]
            entry["outstanding_credits"] += row["credits_reserved"]

    finished = [j for j in jobs if j["state"] == "completed"]
    by_path: dict[str, dict] = {}
    for job in finished:
        entry = by_path.setdefault(job["path"], {"count": 0, "total_runtime_ms": 0})
        entry["count"] += 1
        entry["total_runtime_ms"] += job["end_time"] - job["start_time"]

    output_by_model: dict[str, int] = {}
    for row in done:
        output_by_model[row["model"]] = (
            output_by_model.get(row["model"], 0) + row["output_tokens"]
        )

    alloc = avail = 0
    with open(out / "timeline.csv", encoding="utf-8") as fh:
        next(fh)  # header
        for line in fh:
            start, end, seg_alloc, seg_avail = (int(x) for x in line.split(","))
            alloc += (end - start) * seg_alloc
            avail += (end - start) * seg_avail

    events, digest = trace_digest(out / "trace.tsv")
    if events == 0:
        raise EmptyTrace(f"{out / 'trace.tsv'} has no events")
    action_counts = Counter(d["action"] for d in decisions)

    return {
        "scenario": meta["scenario"],
        "seed": meta["seed"],
        "horizon_ms": meta["horizon_ms"],
        "requests": {
            "total": len(requests),
            "by_status": dict(sorted(Counter(r["status"] for r in requests).items())),
            "completed": len(done),
        },
        "latency_ms": {
            "ttft": _stats([r["ttft_ms"] for r in done]),
            "e2el": _stats([r["e2el_ms"] for r in done]),
            "queue_wait": _stats([r["dispatch"] - r["t"] for r in done]),
        },
        "tokens": {
            "prompt": sum(r["prompt_tokens"] for r in done),
            "output": sum(r["output_tokens"] for r in done),
            "output_by_model": dict(sorted(output_by_model.items())),
        },
        "projects": dict(sorted(projects.items())),
        "batch": {
            "jobs": len(jobs),
            "completed": len(finished),
            "cancelled": sum(1 for j in jobs if j["state"] == "cancelled"),
            "queued": sum(1 for j in jobs if j["state"] == "queued"),
            "running": sum(1 for j in jobs if j["state"] == "running"),
            "requeues": sum(j["requeues"] for j in jobs),
            "by_path": dict(sorted(by_path.items())),
            "finetune_jobs": sum(1 for j in jobs if j["source"] == "finetune"),
            "finetune_completed": sum(
                1 for j in finished if j["source"] == "finetune"
            ),
        },
        "service": {
            "gpu_ms_allocated": alloc,
            "gpu_ms_available": avail,
            "utilization": round(alloc / avail, 6) if avail else 0.0,
        },
        "transitions": {
            "count": len(transitions),
            "by_state": dict(sorted(Counter(r["to"] for r in transitions).items())),
        },
        "elastic": {
            "decisions": len(decisions),
            "acquire": action_counts.get("acquire", 0),
            "release": action_counts.get("release", 0),
            "hold": action_counts.get("hold", 0),
        },
        "checkpoints": {
            "count": len(checkpoints),
            "total_gb": round(sum(c["size_gb"] for c in checkpoints), 6),
        },
        "trace": {"events": events, "digest": digest},
    }


def verify_summary(out_dir: str | Path) -> dict:
    """Recompute the summary and check it against the stored one."""
    out = Path(out_dir)
    recomputed = compute_summary(out)
    stored = json.loads((out / "summary.json").read_text())
    if recomputed != stored:
        diffs = [
            key for key in sorted(set(recomputed) | set(stored))
            if recomputed.get(key) != stored.get(key)
        ]
        raise RuntimeError(
            "summary mismatch between run and artifacts in sections: "
            + ", ".join(diffs)
        )
    return recomputed
