"""Iteration engine: bootstrap, barrier, stragglers, loss, pause, steering.

These run the real asyncio loop with in-memory links, at T = 1 s, so each
test costs a couple of wall seconds. Messages cross the actual codec both
ways.
"""

import asyncio
import time

import pytest

from gradloom.coordinator.config import STEP_BUDGET, ProjectConfig
from gradloom.coordinator.loop import ProjectRuntime, WorkerLink
from gradloom.nn.params import GradientBundle
from gradloom.nn.spec import NetworkSpec, fc_layer, input_layer, softmax_layer
from gradloom.protocol import messages as pm
from gradloom.protocol.framing import FrameDecoder


class FakeLink(WorkerLink):
    def __init__(self, project_id, worker_id, mode="train", capacity=100):
        super().__init__(project_id, worker_id, mode, capacity)
        self.outbox = []
        self.dead = False
        self.runtime = None
        self._decoder = FrameDecoder()

    async def send_raw(self, data):
        if self.dead:
            raise ConnectionError("link closed")
        for payload in self._decoder.feed(data):
            msg = pm.decode(payload)
            self.outbox.append(msg)
            if isinstance(msg, pm.Ping) and self.runtime is not None:
                self.runtime.on_pong(self.worker_id)

    async def close(self):
        self.dead = True

    def msgs(self, cls):
        return [m for m in self.outbox if isinstance(m, cls)]


def hook_up(rt, link):
    link.runtime = rt
    return rt.attach(link)


async def allocated_and_ready(rt, link):
    """Wait for the worker's first allocation, then signal its cache synced."""
    await until(lambda: link.msgs(pm.AllocationUpdate))
    rt.on_stats(link.worker_id, "cache_ready", 1.0)


def make_runtime(**overrides):
    spec = NetworkSpec(
        (input_layer(2, 1, 1), fc_layer(3), softmax_layer(["a", "b"]))
    )
    kw = dict(project_id="p", spec=spec, T_seconds=1.0,
              mode=STEP_BUDGET, step_budget_steps=2)
    kw.update(overrides)
    return ProjectRuntime("p", ProjectConfig(**kw))


def bundle_for(runtime, count=2, value=0.1, version=None):
    grads = runtime.state.params.arrays.zeros_like()
    for arr in grads.arrays():
        arr[:] = value
    v = runtime.state.params.version if version is None else version
    return GradientBundle(params_version=v, grads=grads,
                          example_count=count, compute_ms=5.0)


async def until(cond, timeout=8.0, step=0.02):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        if cond():
            return
        await asyncio.sleep(step)
    raise AssertionError("condition not met within timeout")


def run(coro):
    asyncio.run(asyncio.wait_for(coro, timeout=60))


def test_bootstrap_then_one_full_iteration():
    async def main():
        rt = make_runtime()
        try:
            link = FakeLink("p", "w1")
            welcome = hook_up(rt, link)
            await link.send(welcome)
            assert isinstance(link.outbox[0], pm.Welcome)
            assert link.outbox[0].params.version == 0

            rt.start()
            rt.register_entries([(f"syn/{i:08d}", "a") for i in range(4)])
            await until(lambda: link.msgs(pm.AllocationUpdate))
            update = link.msgs(pm.AllocationUpdate)[0]
            assert len(update.add_ids) == 4

            # not cache-ready yet: no orders may exist
            assert not link.msgs(pm.WorkOrder)
            rt.on_stats("w1", "cache_ready", 1.0)
            await until(lambda: link.msgs(pm.WorkOrder))
            order = link.msgs(pm.WorkOrder)[0]
            assert order.steps == 2 and order.budget_ms is None
            assert order.params.version == 0

            rt.on_report("w1", bundle_for(rt, count=2))
            await until(lambda: rt.records)
            rec = rt.records[0]
            assert rec.iteration == 1
            assert rec.reports_received == 1
            assert rec.total_examples == 2
            assert rec.wall_ms >= 1000.0
            assert rt.state.params.version == 1
            assert rec.workers["w1"].example_count == 2

            # next window carries the stepped params
            await until(lambda: len(link.msgs(pm.WorkOrder)) >= 2)
            assert link.msgs(pm.WorkOrder)[1].params.version == 1
        finally:
            await rt.stop()

    run(main())


def test_straggler_timeout_yields_stalled_iteration():
    async def main():
        rt = make_runtime()
        try:
            link = FakeLink("p", "w1")
            hook_up(rt, link)
            rt.start()
            rt.register_entries([("syn/00000000", "a")])
            await allocated_and_ready(rt, link)
            # never report; straggler deadline is T + 1s
            await until(lambda: rt.records, timeout=10.0)
            rec = rt.records[0]
            assert rec.reports_received == 0
            assert rec.total_examples == 0
            assert rt.state.params.version == 1
            assert rt.state.stalled_iterations == 1
        finally:
            await rt.stop()

    run(main())


def test_stale_version_report_is_counted_not_folded():
    async def main():
        rt = make_runtime()
        try:
            link = FakeLink("p", "w1")
            hook_up(rt, link)
            rt.start()
            rt.register_entries([("syn/00000000", "a")])
            await allocated_and_ready(rt, link)
            await until(lambda: link.msgs(pm.WorkOrder))
            rt.on_report("w1", bundle_for(rt, version=99))
            await until(lambda: rt.records, timeout=10.0)
            rec = rt.records[0]
            assert rec.reports_received == 0
            assert rec.stale_reports == 1
        finally:
            await rt.stop()

    run(main())


def test_lost_worker_ids_move_within_two_iterations():
    async def main():
        rt = make_runtime(per_worker_cap=10)
        try:
            w1, w2 = FakeLink("p", "w1"), FakeLink("p", "w2")
            hook_up(rt, w1)
            hook_up(rt, w2)
            rt.start()
            rt.register_entries([(f"syn/{i:08d}", "a") for i in range(6)])
            await allocated_and_ready(rt, w1)
            await allocated_and_ready(rt, w2)
            await until(lambda: w1.msgs(pm.WorkOrder) and w2.msgs(pm.WorkOrder))
            assert len(rt.state.workers["w1"].allocated_ids) == 3

            before = rt.state.iteration
            rt.detach("w2", reason="killed")
            await until(
                lambda: "w2" not in rt.state.workers
                and len(rt.state.workers["w1"].allocated_ids) == 6
            )
            assert rt.state.iteration <= before + 2
            # every id allocated exactly once
            rt.state.check_invariants()
            # w1 must sync the moved ids before it can rejoin the barrier
            rt.on_stats("w1", "cache_ready", 1.0)
            # a report from the dead worker must not fold
            rt.on_report("w2", bundle_for(rt))
            n = rt.state.iteration
            await until(lambda: rt.state.iteration > n, timeout=10.0)
            assert all(
                "w2" not in rec.workers or rec.workers["w2"].example_count == 0
                for rec in rt.records
            )
        finally:
            await rt.stop()

    run(main())


def test_paused_worker_gets_no_orders_until_resume():
    async def main():
        rt = make_runtime()
        try:
            link = FakeLink("p", "w1")
            hook_up(rt, link)
            rt.start()
            rt.register_entries([("syn/00000000", "a")])
            await allocated_and_ready(rt, link)
            await until(lambda: link.msgs(pm.WorkOrder))
            rt.pause_worker("w1", True)
            await asyncio.sleep(0.1)
            n_orders = len(link.msgs(pm.WorkOrder))
            # idle while paused: no new windows open
            await asyncio.sleep(1.5)
            assert len(link.msgs(pm.WorkOrder)) == n_orders
            rt.pause_worker("w1", False)
            await until(lambda: len(link.msgs(pm.WorkOrder)) > n_orders)
        finally:
            await rt.stop()

    run(main())


def test_hyper_change_lands_in_next_record_and_fans_out():
    async def main():
        rt = make_runtime()
        try:
            link = FakeLink("p", "w1")
            hook_up(rt, link)
            rt.start()
            rt.register_entries([("syn/00000000", "a")])
            await allocated_and_ready(rt, link)
            await until(lambda: link.msgs(pm.WorkOrder))
            rt.set_hyper(rt.state.hyper.updated(learning_rate=0.5))
            await until(lambda: link.msgs(pm.HyperUpdate))
            rt.on_report("w1", bundle_for(rt))
            await until(lambda: rt.records, timeout=10.0)
            assert rt.records[-1].hyper["learning_rate"] == pytest.approx(0.5)
        finally:
            await rt.stop()

    run(main())


def test_tracker_receives_params_and_telemetry():
    async def main():
        rt = make_runtime()
        try:
            trainer = FakeLink("p", "w1")
            tracker = FakeLink("p", "t1", mode="track", capacity=0)
            hook_up(rt, trainer)
            hook_up(rt, tracker)
            rt.start()
            rt.register_entries([("syn/00000000", "a")])
            await allocated_and_ready(rt, trainer)
            await until(lambda: tracker.msgs(pm.ParamBroadcast))
            assert not tracker.msgs(pm.WorkOrder)
            rt.on_stats("t1", "test_error", 0.42)
            rt.on_report("w1", bundle_for(rt))
            await until(lambda: tracker.msgs(pm.Telemetry), timeout=10.0)
            rec = tracker.msgs(pm.Telemetry)[0].record
            assert rec.metrics == {"test_error": 0.42}
        finally:
            await rt.stop()

    run(main())


def test_send_failure_detaches_worker():
    async def main():
        rt = make_runtime()
        try:
            link = FakeLink("p", "w1")
            link.dead = True
            rt.attach(link)
            rt.start()
            rt.register_entries([("syn/00000000", "a")])
            await until(lambda: "w1" not in rt.state.workers)
            assert rt.state.unallocated == {"syn/00000000"}
        finally:
            await rt.stop()

    run(main())


def test_label_growth_rewelcomes_peers():
    async def main():
        rt = make_runtime()
        try:
            link = FakeLink("p", "w1")
            welcome = hook_up(rt, link)
            await link.send(welcome)
            rt.start()
            new = rt.register_entries([("syn/00000000", "c")])
            assert new == ["c"]
            await until(lambda: len(link.msgs(pm.Welcome)) >= 2)
            second = link.msgs(pm.Welcome)[1]
            assert second.spec.labels == ["a", "b", "c"]
            assert second.params.version == 1
        finally:
            await rt.stop()

    run(main())
