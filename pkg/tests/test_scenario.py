"""Scenario loading: defaults merge, typed parsing, total validation."""

import pytest

from planesim.batch import CommClass
from planesim.bridge import RecipeKind
from planesim.core import Detached, JoinedBatch, JoinedService, NetworkPathKind
from planesim.errors import ConfigError
from planesim.scenario import _merge, load_defaults, load_scenario

FULL = """
name: full
horizon_ms: 7200000
seed: 7
operators: [ops, oncall]
transition:
  reboot_ms: 500000
nodes:
  - id: svc-1
    flavour: hpc-diskless
    gpus: 4
    gpu_mem_gb: 96
    cpu_cores: 64
    plane: service
    cluster: infer
    network: [hsn-rdma, mgmt-eth]
    labels: ["pool=infer"]
  - id: batch-1
    flavour: hpc-diskless
    gpus: 4
    gpu_mem_gb: 96
    cpu_cores: 64
    plane: batch
    network:
      - kind: hsn-tcp-multi
        lanes: 8
  - id: spare-1
    flavour: bare-metal
    gpus: 4
    gpu_mem_gb: 96
    cpu_cores: 64
    plane: detached
models:
  - name: small-8b
    params_b: 8
    weights_gb: 16
    gpus_required: 1
    max_concurrent: 8
    ttft_base_ms: 120
    prefill_per_token_ms: 0.2
    itl_ms: 11
    cost_per_1k_tokens: 0.5
projects:
  - id: research
    members: [ana]
    token_budget: 1000000
    credit_budget: 1000
    rate_limit: {capacity: 100, refill_per_s: 50}
    allowed_models: [small-8b]
    keys:
      - key: rk-1
        per_key_budget: 500000
      - key: rk-2
        expiry: 3600000
deployments:
  - id: dep-small
    project: research
    model: small-8b
    replicas: 2
changes:
  - {at_ms: 600000, deployment: dep-small, replicas: 3}
  - {at_ms: 100000, deployment: dep-small, replicas: 1}
traffic:
  - name: day
    base_qps: 0.05
    amplitude: 0.4
    peak_hour: 13
    models: {small-8b: 1.0}
    keys: {rk-1: 0.7, rk-2: 0.3}
    prompt: {lo: 50, mode: 200, hi: 800}
    output: {lo: 100, mode: 300, hi: 800, p_tail: 0.2, tail_lo: 2000, tail_hi: 3000}
batch_jobs:
  - id: sim-1
    project: research
    nodes: 1
    walltime_ms: 600000
    base_runtime_ms: 300000
    at_ms: 1000
recipes:
  - name: lora-small
    kind: lora
    base_model: small-8b
    nodes: 1
    epochs: 3
    est_ms_per_epoch: 600000
finetune_traffic:
  - name: ft
    per_day: 2
    recipes: {lora-small: 1.0}
    projects: {research: 1.0}
finetune_submissions:
  - {at_ms: 5000, recipe: lora-small, project: research}
elastic:
  enabled: true
  policy: schedule
  schedule:
    windows:
      - {start_hour: 8, end_hour: 20, delta_nodes: 1}
maintenance:
  - {node: batch-1, start_ms: 1000000, end_ms: 2000000, authorized_by: ops, reason: kernel}
retention:
  keep_newest: 3
  min_age_ms: 86400000
"""

BROKEN = """
name: broken
nodes:
  - id: n1
    flavour: no-such
  - id: n1
    plane: weird
models:
  - name: m1
    weights_gb: 10
    gpus_required: 1
    max_concurrent: 1
    ttft_base_ms: 100
    prefill_per_token_ms: 0.1
    itl_ms: 10
    cost_per_1k_tokens: 1.0
deployments:
  - id: d1
    project: nope
    model: ghost
    replicas: -1
changes:
  - {at_ms: 10, deployment: other, replicas: 1}
traffic:
  - name: t
    base_qps: 1.0
    models: {ghost: 1}
    keys: {nokey: 1}
    prompt: {lo: 1, mode: 2, hi: 3}
    output: {lo: 1, mode: 2, hi: 3}
recipes:
  - name: r1
    kind: lora
    base_model: ghost
    nodes: 1
    epochs: 1
    est_ms_per_epoch: 1000
maintenance:
  - {node: nx, start_ms: 5, end_ms: 2, authorized_by: nobody}
"""


def write(tmp_path, name, text):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_merge_is_recursive_for_dicts():
    base = {"a": {"x": 1, "y": 2}, "b": [1, 2], "c": 3}
    override = {"a": {"y": 9, "z": 10}, "b": [7]}
    merged = _merge(base, override)
    assert merged == {"a": {"x": 1, "y": 9, "z": 10}, "b": [7], "c": 3}
    assert base == {"a": {"x": 1, "y": 2}, "b": [1, 2], "c": 3}


def test_defaults_load_and_carry_core_knobs():
    cfg = load_defaults()
    assert cfg["transition"]["reboot_ms"] == 600_000
    assert cfg["transition"]["join_ms"] == 120_000
    assert cfg["transition"]["detach_ms"] == 60_000
    assert cfg["elastic"]["enabled"] is False
    assert cfg["reconcile_interval_ms"] == 30_000


def test_minimal_scenario_gets_defaults(tmp_path):
    s = load_scenario(write(tmp_path, "mini.yaml", "horizon_ms: 1000\n"))
    assert s.name == "mini"
    assert s.horizon_ms == 1_000
    assert s.seed == 0
    assert s.transition.reboot_ms == 600_000
    assert s.elastic.enabled is False
    assert s.reconcile_interval_ms == 30_000
    assert s.nodes == [] and s.traffic == [] and s.recipes == []


def test_seed_override_wins(tmp_path):
    path = write(tmp_path, "mini.yaml", "seed: 5\n")
    assert load_scenario(path).seed == 5
    assert load_scenario(path, seed=42).seed == 42


def test_full_scenario_round_trip(tmp_path):
    s = load_scenario(write(tmp_path, "full.yaml", FULL))
    assert s.name == "full"
    assert s.horizon_ms == 7_200_000 and s.seed == 7
    assert s.operators == frozenset({"ops", "oncall"})
    assert s.transition.reboot_ms == 500_000
    assert s.transition.join_ms == 120_000

    by_id = {n.id: n for n in s.nodes}
    assert isinstance(by_id["svc-1"].state, JoinedService)
    assert by_id["svc-1"].state.cluster == "infer"
    assert isinstance(by_id["batch-1"].state, JoinedBatch)
    assert isinstance(by_id["spare-1"].state, Detached)
    kinds = {p.kind for p in by_id["svc-1"].network_paths}
    assert kinds == {NetworkPathKind.HSN_RDMA, NetworkPathKind.MGMT_ETH}
    (multi,) = by_id["batch-1"].network_paths
    assert multi.kind is NetworkPathKind.HSN_TCP_MULTI and multi.lanes == 8
    assert "pool=infer" in by_id["svc-1"].labels

    assert s.profiles["small-8b"].itl_ms == 11
    assert s.profiles["small-8b"].max_context == 8_192

    research = s.projects["research"]
    assert research.rate_limit.capacity == 100
    assert research.allowed_models == frozenset({"small-8b"})
    assert s.keys["rk-1"].per_key_budget == 500_000
    assert s.keys["rk-2"].expiry == 3_600_000
    assert s.keys["rk-2"].project_id == "research"

    assert [d["id"] for d in s.deployments] == ["dep-small"]
    assert [c["at_ms"] for c in s.changes] == [100_000, 600_000]

    (day,) = s.traffic
    assert day.rate.base_qps == 0.05 and day.rate.peak_hour == 13
    assert day.prompt.mode == 200
    assert day.output.p_tail == 0.2 and day.output.tail_hi == 3_000

    ((at, job),) = s.batch_jobs
    assert at == 1_000 and job.id == "sim-1"
    assert job.comm_class is CommClass.SMALL

    (recipe,) = s.recipes
    assert recipe.kind is RecipeKind.LORA and recipe.checkpoint_every == 1

    (ft,) = s.finetune_traffic
    assert ft.per_day == 2 and ft.recipe_weights == {"lora-small": 1.0}
    assert s.finetune_submissions == [
        {"at_ms": 5_000, "recipe": "lora-small", "project": "research"}
    ]

    assert s.elastic.enabled and s.elastic.policy == "schedule"
    (window,) = s.elastic.schedule.windows
    assert (window.start_hour, window.end_hour, window.delta_nodes) == (8, 20, 1)

    (mw,) = s.maintenance
    assert mw.node_id == "batch-1" and mw.authorized_by == "ops"
    assert s.retention.keep_newest == 3 and s.retention.min_age_ms == 86_400_000


def test_broken_scenario_reports_every_problem_at_once(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_scenario(write(tmp_path, "broken.yaml", BROKEN))
    errors = info.value.errors
    assert len(errors) >= 10
    text = "\n".join(errors)
    assert "unknown flavour 'no-such'" in text
    assert "duplicate id" in text
    assert "unknown model 'ghost'" in text
    assert "unknown project 'nope'" in text
    assert "replicas must be >= 0" in text
    assert "unknown deployment 'other'" in text
    assert "unknown api key 'nokey'" in text
    assert "unknown base model 'ghost'" in text
    assert "unknown node 'nx'" in text
    assert "'nobody' not in operators" in text
    assert "start must be before end" in text


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "nope.yaml")


def test_non_mapping_yaml_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(write(tmp_path, "scalar.yaml", "just a string\n"))


def test_invalid_yaml_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(write(tmp_path, "bad.yaml", "a: [unclosed\n"))


def test_duplicate_sections_are_flagged(tmp_path):
    text = """
nodes:
  - {id: a, gpus: 1, plane: batch}
  - {id: a, gpus: 1, plane: batch}
models:
  - {name: m, weights_gb: 1, gpus_required: 1, max_concurrent: 1,
     ttft_base_ms: 1, prefill_per_token_ms: 0.1, itl_ms: 1, cost_per_1k_tokens: 1}
  - {name: m, weights_gb: 1, gpus_required: 1, max_concurrent: 1,
     ttft_base_ms: 1, prefill_per_token_ms: 0.1, itl_ms: 1, cost_per_1k_tokens: 1}
projects:
  - {id: p}
  - {id: p}
"""
    with pytest.raises(ConfigError) as info:
        load_scenario(write(tmp_path, "dups.yaml", text))
    text = "\n".join(info.value.errors)
    assert "node a: duplicate id" in text
    assert "model m: duplicate name" in text
    assert "project p: duplicate id" in text


def test_unknown_elastic_policy_is_flagged(tmp_path):
    text = "elastic: {enabled: true, policy: psychic}\n"
    with pytest.raises(ConfigError) as info:
        load_scenario(write(tmp_path, "pol.yaml", text))
    assert any("unknown policy" in e for e in info.value.errors)


def test_zero_horizon_is_flagged(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_scenario(write(tmp_path, "h.yaml", "horizon_ms: 0\n"))
    assert any("horizon_ms" in e for e in info.value.errors)
