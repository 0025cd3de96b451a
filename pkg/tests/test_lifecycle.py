"""Lifecycle plans, reboot cache semantics, maintenance windows."""

import pytest

from planesim.core import (
    Detached,
    Draining,
    JoinedBatch,
    JoinedService,
    Maintenance,
    Node,
    NodeFlavour,
    Provisioning,
    Rebooting,
)
from planesim.engine import Engine
from planesim.errors import (
    OverlappingMaintenance,
    SchedulingInPast,
    TransitionConflict,
    Unauthorized,
)
from planesim.lifecycle import (
    MaintenanceWindow,
    NodeLifecycle,
    PlanStep,
    TransitionSpec,
    plan_transition,
)

SPEC = TransitionSpec()  # reboot 600s, join 120s, detach 60s


def make_node(state, flavour=NodeFlavour.HPC_DISKLESS, id="n1"):
    return Node(id=id, flavour=flavour, gpus=4, gpu_mem_gb=96.0, state=state)


def states(plan):
    return [type(s.state).__name__ for s in plan]


def times(plan):
    return [s.at for s in plan]


class TestPlanning:
    def test_batch_to_service_reboots(self):
        node = make_node(JoinedBatch())
        plan = plan_transition(node, JoinedService("infer"), now=0, spec=SPEC)
        assert states(plan) == ["Draining", "Rebooting", "Provisioning", "JoinedService"]
        assert times(plan) == [0, 0, 600_000, 720_000]

    def test_drain_waits_for_running_job(self):
        node = make_node(JoinedBatch())
        plan = plan_transition(
            node, JoinedService("infer"), now=0, spec=SPEC, busy_until=500_000
        )
        assert times(plan) == [0, 500_000, 1_100_000, 1_220_000]

    def test_service_to_service_skips_reboot(self):
        node = make_node(JoinedService("a"))
        plan = plan_transition(node, JoinedService("b"), now=10, spec=SPEC)
        assert states(plan) == ["Draining", "Provisioning", "JoinedService"]
        assert times(plan) == [10, 10, 120_010]

    def test_service_to_batch_reboots(self):
        node = make_node(JoinedService("a"))
        plan = plan_transition(node, JoinedBatch(), now=0, spec=SPEC)
        assert states(plan) == ["Draining", "Rebooting", "Provisioning", "JoinedBatch"]
        assert times(plan) == [0, 0, 600_000, 720_000]

    def test_detached_joins_without_reboot(self):
        node = make_node(Detached())
        plan = plan_transition(node, JoinedBatch(), now=0, spec=SPEC)
        assert states(plan) == ["Provisioning", "JoinedBatch"]
        assert times(plan) == [0, 120_000]

    def test_detach_powers_off_without_scrub_reboot(self):
        node = make_node(JoinedService("a"))
        plan = plan_transition(node, Detached(), now=0, spec=SPEC)
        assert states(plan) == ["Draining", "Detached"]
        assert times(plan) == [0, 60_000]

    def test_batch_detach_waits_for_job_then_detach_delay(self):
        node = make_node(JoinedBatch())
        plan = plan_transition(node, Detached(), now=0, spec=SPEC, busy_until=100_000)
        assert times(plan) == [0, 160_000]

    def test_already_at_target_conflicts(self):
        node = make_node(JoinedService("a"))
        with pytest.raises(TransitionConflict):
            plan_transition(node, JoinedService("a"), now=0, spec=SPEC)
        # a different cluster is a real move
        plan_transition(node, JoinedService("b"), now=0, spec=SPEC)

    def test_mid_transition_conflicts(self):
        for busy in (Draining("x", "y"), Rebooting("x"), Provisioning(), Maintenance()):
            node = make_node(busy)
            with pytest.raises(TransitionConflict):
                plan_transition(node, JoinedBatch(), now=0, spec=SPEC)

    def test_transient_state_not_a_target(self):
        node = make_node(JoinedBatch())
        with pytest.raises(TransitionConflict):
            plan_transition(node, Rebooting("joined-batch"), now=0, spec=SPEC)


def build(state=None, flavour=NodeFlavour.HPC_DISKLESS):
    eng = Engine(seed=1)
    lc = NodeLifecycle(engine=eng, operators=frozenset({"ops"}))
    node = make_node(state or Detached(), flavour=flavour)
    lc.add_node(node)
    return eng, lc, node


class TestExecution:
    def test_batch_to_service_end_to_end(self):
        eng, lc, node = build(JoinedBatch())
        lc.request_transition("n1", JoinedService("infer"))
        eng.run_until(719_999)
        assert isinstance(node.state, Provisioning)
        eng.run_until(720_000)
        assert node.state == JoinedService("infer")
        assert not lc.in_transition("n1")

    def test_second_request_while_in_flight_conflicts(self):
        eng, lc, node = build(JoinedBatch())
        lc.request_transition("n1", JoinedService("infer"))
        with pytest.raises(TransitionConflict):
            lc.request_transition("n1", Detached())

    def test_reboot_clears_diskless_cache(self):
        eng, lc, node = build(JoinedBatch())
        node.cached_weights["m"] = 140.0
        node.transient_labels.add("warm=m")
        lc.request_transition("n1", JoinedService("infer"))
        eng.run_until(720_000)
        assert node.cached_weights == {}
        assert node.transient_labels == set()

    def test_reboot_keeps_bare_metal_cache(self):
        eng, lc, node = build(JoinedBatch(), flavour=NodeFlavour.BARE_METAL)
        node.cached_weights["m"] = 140.0
        lc.request_transition("n1", JoinedService("infer"))
        eng.run_until(720_000)
        assert node.cached_weights == {"m": 140.0}

    def test_service_move_preserves_diskless_cache(self):
        eng, lc, node = build(JoinedService("a"))
        node.cached_weights["m"] = 140.0
        lc.request_transition("n1", JoinedService("b"))
        eng.run_until(120_000)
        assert node.state == JoinedService("b")
        assert node.cached_weights == {"m": 140.0}

    def test_detach_clears_diskless_cache(self):
        eng, lc, node = build(JoinedService("a"))
        node.cached_weights["m"] = 140.0
        lc.request_transition("n1", Detached())
        eng.run_until(60_000)
        assert isinstance(node.state, Detached)
        assert node.cached_weights == {}

    def test_observers_see_each_change(self):
        eng, lc, node = build(Detached())
        seen = []
        lc.observers.append(lambda n, old, new, t: seen.append((t, type(new).__name__)))
        lc.request_transition("n1", JoinedBatch())
        eng.run_until(120_000)
        assert seen == [(0, "Provisioning"), (120_000, "JoinedBatch")]

    def test_log_records_every_change(self):
        eng, lc, node = build(Detached())
        lc.request_transition("n1", JoinedBatch())
        eng.run_until(120_000)
        assert [row["to"] for row in lc.log] == ["provisioning", "joined-batch"]
        assert all(row["node"] == "n1" for row in lc.log)


class TestMaintenance:
    def test_requires_authorized_operator(self):
        eng, lc, node = build(JoinedService("a"))
        with pytest.raises(Unauthorized):
            lc.schedule_maintenance(
                MaintenanceWindow("n1", 100, 200, authorized_by="mallory")
            )

    def test_rejects_past_start(self):
        eng, lc, node = build(JoinedService("a"))
        eng.run_until(500)
        with pytest.raises(SchedulingInPast):
            lc.schedule_maintenance(MaintenanceWindow("n1", 100, 200, "ops"))

    def test_rejects_inverted_window(self):
        eng, lc, node = build(JoinedService("a"))
        with pytest.raises(ValueError):
            lc.schedule_maintenance(MaintenanceWindow("n1", 200, 200, "ops"))

    def test_rejects_any_intersection(self):
        eng, lc, node = build(JoinedService("a"))
        lc.schedule_maintenance(MaintenanceWindow("n1", 100, 200, "ops"))
        for start, end in [(150, 250), (50, 150), (100, 200), (120, 180), (50, 300)]:
            with pytest.raises(OverlappingMaintenance):
                lc.schedule_maintenance(MaintenanceWindow("n1", start, end, "ops"))
        # touching windows and other nodes are fine
        lc.schedule_maintenance(MaintenanceWindow("n1", 200, 300, "ops"))
        other = make_node(JoinedService("a"), id="n2")
        lc.add_node(other)
        lc.schedule_maintenance(MaintenanceWindow("n2", 100, 200, "ops"))

    def test_service_node_returns_after_join_delay(self):
        eng, lc, node = build(JoinedService("a"))
        lc.schedule_maintenance(MaintenanceWindow("n1", 1_000, 5_000, "ops"))
        eng.run_until(1_000)
        assert isinstance(node.state, Maintenance)
        eng.run_until(5_000 + 120_000 - 1)
        assert isinstance(node.state, Provisioning)
        eng.run_until(5_000 + 120_000)
        assert node.state == JoinedService("a")

    def test_batch_node_returns_via_reboot(self):
        eng, lc, node = build(JoinedBatch())
        lc.schedule_maintenance(MaintenanceWindow("n1", 1_000, 5_000, "ops"))
        eng.run_until(5_000 + 600_000 + 120_000)
        assert isinstance(node.state, JoinedBatch)

    def test_maintenance_clears_diskless_cache(self):
        eng, lc, node = build(JoinedService("a"))
        node.cached_weights["m"] = 16.0
        lc.schedule_maintenance(MaintenanceWindow("n1", 1_000, 5_000, "ops"))
        eng.run_until(1_000)
        assert node.cached_weights == {}

    def test_preempts_transition_then_resumes_to_its_target(self):
        eng, lc, node = build(JoinedBatch())
        lc.request_transition("n1", JoinedService("infer"))  # lands at 720000
        lc.schedule_maintenance(MaintenanceWindow("n1", 300_000, 400_000, "ops"))
        eng.run_until(300_000)
        assert isinstance(node.state, Maintenance)
        # cancelled plan steps must not fire during the window
        eng.run_until(399_999)
        assert isinstance(node.state, Maintenance)
        eng.run_until(400_000 + 120_000)
        assert node.state == JoinedService("infer")

    def test_detached_node_returns_to_detached(self):
        eng, lc, node = build(Detached())
        lc.schedule_maintenance(MaintenanceWindow("n1", 1_000, 2_000, "ops"))
        eng.run_until(2_000)
        assert isinstance(node.state, Detached)
