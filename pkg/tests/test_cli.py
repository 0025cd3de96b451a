"""Command line behaviour: exit codes, outputs, artifact round trips."""

import json

import pytest

from planesim.cli import main

SCENARIO = """
name: clitest
horizon_ms: 1800000
seed: 1
nodes:
  - id: infer-1
    flavour: hpc-diskless
    gpus: 4
    gpu_mem_gb: 96
    cpu_cores: 32
    plane: service
    network: [hsn-rdma]
  - id: batch-1
    flavour: hpc-diskless
    gpus: 4
    gpu_mem_gb: 96
    cpu_cores: 32
    plane: batch
    network: [hsn-rdma]
models:
  - name: tiny
    params_b: 1
    weights_gb: 2
    gpus_required: 1
    max_concurrent: 4
    ttft_base_ms: 50
    prefill_per_token_ms: 0.1
    itl_ms: 5
    cost_per_1k_tokens: 1.0
projects:
  - id: lab
    token_budget: 10000000
    credit_budget: 10000
    allowed_models: [tiny]
    keys:
      - key: lab-key
deployments:
  - id: serve
    project: lab
    model: tiny
    replicas: 1
traffic:
  - name: steady
    base_qps: 0.01
    models: {tiny: 1.0}
    keys: {lab-key: 1.0}
    prompt: {lo: 10, mode: 50, hi: 200}
    output: {lo: 20, mode: 60, hi: 200}
recipes:
  - name: tune
    kind: lora
    base_model: tiny
    nodes: 1
    epochs: 3
    est_ms_per_epoch: 120000
finetune_submissions:
  - {at_ms: 1000, recipe: tune, project: lab}
"""


@pytest.fixture
def scenario_path(tmp_path):
    path = tmp_path / "clitest.yaml"
    path.write_text(SCENARIO)
    return path


def test_run_prints_summary_and_writes_artifacts(scenario_path, tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["run", str(scenario_path), "--out", str(out)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["scenario"] == "clitest"
    assert (out / "trace.tsv").exists()
    assert summary == json.loads((out / "summary.json").read_text())


def test_run_seed_override_changes_summary(scenario_path, capsys):
    assert main(["run", str(scenario_path)]) == 0
    first = json.loads(capsys.readouterr().out)
    assert main(["run", str(scenario_path), "--seed", "7"]) == 0
    second = json.loads(capsys.readouterr().out)
    assert first["seed"] == 1 and second["seed"] == 7
    assert first["trace"]["digest"] != second["trace"]["digest"]


def test_run_bad_scenario_exits_2(tmp_path, capsys):
    path = tmp_path / "bad.yaml"
    path.write_text("models:\n  - name: m\n")
    assert main(["run", str(path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_run_missing_file_exits_2(tmp_path, capsys):
    assert main(["run", str(tmp_path / "absent.yaml")]) == 2


def test_report_verifies_and_reprints(scenario_path, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", str(scenario_path), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert json.loads(capsys.readouterr().out)["scenario"] == "clitest"


def test_report_detects_tampered_artifacts(scenario_path, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", str(scenario_path), "--out", str(out)])
    ledger = out / "ledger.jsonl"
    lines = ledger.read_text().splitlines()
    ledger.write_text("\n".join(lines[:-1]) + "\n")
    capsys.readouterr()
    assert main(["report", str(out)]) == 3
    assert "summary mismatch" in capsys.readouterr().err


def test_replay_check_identical(scenario_path, tmp_path, capsys):
    main(["run", str(scenario_path), "--out", str(tmp_path / "a")])
    main(["run", str(scenario_path), "--out", str(tmp_path / "b")])
    capsys.readouterr()
    assert main(["replay-check", str(tmp_path / "a"), str(tmp_path / "b")]) == 0
    assert "traces identical" in capsys.readouterr().out


def test_replay_check_divergent(scenario_path, tmp_path, capsys):
    main(["run", str(scenario_path), "--out", str(tmp_path / "a")])
    main(["run", str(scenario_path), "--out", str(tmp_path / "b"), "--seed", "9"])
    capsys.readouterr()
    assert main(["replay-check", str(tmp_path / "a"), str(tmp_path / "b")]) == 3
    assert "diverge" in capsys.readouterr().err


def test_replay_check_truncated_trace(scenario_path, tmp_path, capsys):
    main(["run", str(scenario_path), "--out", str(tmp_path / "a")])
    main(["run", str(scenario_path), "--out", str(tmp_path / "b")])
    trace = tmp_path / "b" / "trace.tsv"
    lines = trace.read_text().splitlines()
    trace.write_text("\n".join(lines[:-2]) + "\n")
    capsys.readouterr()
    assert main(["replay-check", str(tmp_path / "a"), str(tmp_path / "b")]) == 3


def test_replay_check_empty_trace_exits_3(scenario_path, tmp_path, capsys):
    main(["run", str(scenario_path), "--out", str(tmp_path / "a")])
    empty = tmp_path / "empty.tsv"
    empty.write_text("")
    capsys.readouterr()
    assert main(["replay-check", str(tmp_path / "a"), str(empty)]) == 3
    assert "no events" in capsys.readouterr().err


def test_gc_plan_from_run_artifacts(scenario_path, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", str(scenario_path), "--out", str(out)])
    capsys.readouterr()
    assert main([
        "gc-plan", str(out / "checkpoints.jsonl"), "--keep-newest", "1",
    ]) == 0
    plan = json.loads(capsys.readouterr().out)
    # 3 epochs -> 3 checkpoints plus the referenced root; keep newest 1
    assert len(plan["delete"]) == 2
    assert "tiny" in plan["keep"]
    assert plan["reclaimed_gb"] == pytest.approx(2.0)


def test_gc_plan_respects_min_age(scenario_path, tmp_path, capsys):
    out = tmp_path / "out"
    main(["run", str(scenario_path), "--out", str(out)])
    capsys.readouterr()
    assert main([
        "gc-plan", str(out / "checkpoints.jsonl"),
        "--keep-newest", "1", "--min-age-ms", "999999999",
    ]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["delete"] == []
