"""Iteration engine.

One asyncio task per project drives the fixed-duration loop: drain control
events (losses, data, joins), broadcast work orders with per-worker budgets,
gather reports behind a straggler deadline, hold the iteration wall, reduce.
A window opens at each broadcast and is consumed by the following reduce;
the bootstrap broadcast (sent when the first trainer becomes cache-ready)
opens window one, so N reduces mean N counted iterations.

All entry points run on the server's event loop; nothing here is
thread-safe and nothing needs to be.
"""

from __future__ import annotations

import asyncio
import json
import logging
import time
from collections import deque

import numpy as np

from gradloom.coordinator.config import ProjectConfig
from gradloom.coordinator.state import TRAIN, ProjectState
from gradloom.datastore.decode import decode_item
from gradloom.nn.archive import ModelArchive, serialize
from gradloom.nn.network import forward
from gradloom.nn.optim import Hyperparams
from gradloom.nn.params import GradientBundle
from gradloom.protocol import messages as pm
from gradloom.protocol.framing import encode_frame

log = logging.getLogger("gradloom.coordinator")

COORDINATOR_ID = "coordinator"
TRACK = "track"
IDLE_POLL_S = 0.25
RECORD_BACKLOG = 512


class WorkerLink:
    """Transport handle for one connected peer.

    Subclasses implement send_raw/close over a real socket. Sends are
    serialized per link; message sequence numbers are per direction.
    """

    def __init__(self, project_id: str, worker_id: str, mode: str, capacity: int):
        self.project_id = project_id
        self.worker_id = worker_id
        self.mode = mode
        self.capacity = capacity
        self._seq = 0
        self._lock = asyncio.Lock()

    def make(self, cls, **fields) -> pm.Message:
        msg = cls(self.project_id, COORDINATOR_ID, self._seq, **fields)
        self._seq += 1
        return msg

    async def post(self, cls, **fields) -> None:
        await self.send(self.make(cls, **fields))

    async def send(self, msg: pm.Message) -> None:
        data = encode_frame(pm.encode(msg))
        async with self._lock:
            await self.send_raw(data)

    async def send_raw(self, data: bytes) -> None:
        raise NotImplementedError

    async def close(self) -> None:
        pass


class ProjectRuntime:
    def __init__(self, project_id: str, config: ProjectConfig,
                 archive: ModelArchive | None = None):
        self.project_id = project_id
        self.state = ProjectState(config, archive)
        self.links: dict[str, WorkerLink] = {}
        self.records: deque[pm.IterationRecord] = deque(maxlen=RECORD_BACKLOG)
        self._pending_joins: list[str] = []
        self._pending_losses: list[str] = []
        self._window: dict[str, GradientBundle] = {}
        self._window_open = False
        self._window_recipients: set[str] = set()
        self._window_waiting: set[str] = set()
        self._window_stale = 0
        self._order_sent_ms: dict[str, float] = {}
        self._last_contact: dict[str, float] = {}
        self._wake = asyncio.Event()
        self._subscribers: set[asyncio.Queue] = set()
        self._send_tasks: set[asyncio.Task] = set()
        self._task: asyncio.Task | None = None
        self._ping_task: asyncio.Task | None = None
        self._running = False

    # -- lifecycle ------------------------------------------------------------

    def start(self) -> None:
        self._running = True
        self._task = asyncio.create_task(self._run(), name=f"loop:{self.project_id}")
        self._ping_task = asyncio.create_task(self._pings(), name=f"ping:{self.project_id}")

    async def stop(self) -> None:
        self._running = False
        self._wake.set()
        for link in list(self.links.values()):
            self._post(link, pm.Bye, reason="coordinator shutting down")
        await asyncio.sleep(0)
        for task in (self._task, self._ping_task, *list(self._send_tasks)):
            if task is not None:
                task.cancel()
        await asyncio.gather(
            *(t for t in (self._task, self._ping_task) if t is not None),
            return_exceptions=True,
        )
        for link in list(self.links.values()):
            try:
                await link.close()
            except Exception:
                pass
        self.links.clear()

    # -- peer entry points (called by the server) -------------------------------

    def attach(self, link: WorkerLink) -> pm.Message:
        """Register a connected peer; returns the Welcome to send."""
        self.state.add_worker(link.worker_id, link.mode, link.capacity)
        self.links[link.worker_id] = link
        self._touch(link.worker_id)
        if link.mode == TRAIN:
            self._pending_joins.append(link.worker_id)
        self._wake.set()
        log.info("%s: %s joined (mode=%s, capacity=%d)",
                 self.project_id, link.worker_id, link.mode, link.capacity)
        return link.make(
            pm.Welcome,
            spec=self.state.net.spec,
            hyper=self.state.hyper,
            params=self.state.params,
        )

    def detach(self, worker_id: str, reason: str = "connection closed") -> None:
        if self.links.pop(worker_id, None) is None:
            return
        log.info("%s: %s lost (%s)", self.project_id, worker_id, reason)
        self._pending_losses.append(worker_id)
        self._window_waiting.discard(worker_id)
        self._last_contact.pop(worker_id, None)
        self._wake.set()

    def on_report(self, worker_id: str, bundle: GradientBundle) -> None:
        self._touch(worker_id)
        usable = (
            self._window_open
            and worker_id in self._window_recipients
            and worker_id not in self._window
            and bundle.params_version == self.state.params.version
        )
        if not usable:
            self._window_stale += 1
            log.info("%s: discarding report from %s (version %d, current %d)",
                     self.project_id, worker_id, bundle.params_version,
                     self.state.params.version)
            return
        sent = self._order_sent_ms.get(worker_id)
        if sent is not None:
            rtt = time.monotonic() * 1000.0 - sent
            self.state.update_latency(worker_id, rtt, bundle.compute_ms)
        self._window[worker_id] = bundle
        self._window_waiting.discard(worker_id)
        self._wake.set()

    def on_stats(self, worker_id: str, metric_name: str, value: float) -> None:
        self._touch(worker_id)
        if metric_name == "cache_ready":
            self.state.set_cache_ready(worker_id)
        else:
            self.state.note_metric(metric_name, value)
        self._wake.set()

    def on_pong(self, worker_id: str) -> None:
        self._touch(worker_id)

    # -- control surface (HTTP and WS) ------------------------------------------

    def set_hyper(self, hyper: Hyperparams) -> None:
        self.state.set_hyperparams(hyper)
        for link in self.links.values():
            self._post(link, pm.HyperUpdate, hyper=hyper)

    def set_duration(self, t_seconds: float) -> None:
        self.state.set_duration(t_seconds)

    def pause_worker(self, worker_id: str, paused: bool) -> None:
        self.state.set_paused(worker_id, paused)
        if paused:
            self._window_waiting.discard(worker_id)
        self._wake.set()

    def register_entries(self, entries: list[tuple[str, str]]) -> list[str]:
        """Add labeled ids; on label growth re-welcome every peer, since the
        model geometry (and params version) just changed under them."""
        new_labels = self.state.register_dataset(entries)
        if new_labels:
            for link in self.links.values():
                self._post(
                    link, pm.Welcome,
                    spec=self.state.net.spec,
                    hyper=self.state.hyper,
                    params=self.state.params,
                )
        self._wake.set()
        return new_labels

    def archive_obj(self) -> dict:
        return json.loads(serialize(self.state.snapshot()))

    def predict(self, *, tensor=None, image_png: bytes | None = None) -> tuple[str, float]:
        if (tensor is None) == (image_png is None):
            raise ValueError("provide exactly one of tensor or image bytes")
        if tensor is not None:
            arr = tensor.as_hwd()
        else:
            arr = decode_item(image_png)
        w, h, d = self.state.net.input_shape
        if arr.shape != (h, w, d):
            raise ValueError(
                f"input shape {arr.shape[1], arr.shape[0], arr.shape[2]} does not "
                f"match the model input (w, h, d) = {(w, h, d)}"
            )
        probs, _ = forward(self.state.net, self.state.params, arr)
        idx = int(np.argmax(probs))
        return self.state.net.labels[idx], float(probs[idx])

    def status(self) -> dict:
        cfg = self.state.config
        return {
            "project_id": self.project_id,
            "iteration": self.state.iteration,
            "params_version": self.state.params.version,
            "labels": list(self.state.net.labels),
            "T_seconds": cfg.T_seconds,
            "mode": cfg.mode,
            "hyper": self.state.hyper.to_obj(),
            "data_total": len(self.state.data),
            "unallocated": len(self.state.unallocated),
            "stalled_iterations": self.state.stalled_iterations,
            "workers": [
                {
                    "worker_id": w.worker_id,
                    "mode": w.mode,
                    "paused": w.paused,
                    "cache_ready": w.cache_ready,
                    "allocated": len(w.allocated_ids),
                    "latency_ewma_ms": w.latency_ewma_ms,
                }
                for w in sorted(self.state.workers.values(), key=lambda w: w.worker_id)
            ],
        }

    def subscribe(self) -> asyncio.Queue:
        q: asyncio.Queue = asyncio.Queue(maxsize=RECORD_BACKLOG)
        self._subscribers.add(q)
        return q

    def unsubscribe(self, q: asyncio.Queue) -> None:
        self._subscribers.discard(q)

    # -- loop ---------------------------------------------------------------------

    async def _run(self) -> None:
        try:
            while self._running:
                self._drain_control()
                if not self.state.barrier_members():
                    await self._wait_wake(IDLE_POLL_S)
                    continue
                self._broadcast_orders()
                t0 = time.monotonic()
                await self._gather_reports(t0)
                await self._sleep_wall(t0)
                self._drain_control()
                self._reduce(t0)
        except asyncio.CancelledError:
            raise
        except Exception:
            log.exception("%s: iteration loop crashed", self.project_id)
            raise

    def _drain_control(self) -> None:
        # losses free capacity first; then new data; joins carve last
        while self._pending_losses:
            worker_id = self._pending_losses.pop(0)
            adds = self.state.handle_worker_loss(worker_id)
            self._send_updates({w: {"add": a, "remove": []} for w, a in adds.items()})
        self._send_updates(
            {w: {"add": a, "remove": []}
             for w, a in self.state.allocate_unallocated().items()}
        )
        while self._pending_joins:
            worker_id = self._pending_joins.pop(0)
            if worker_id in self.state.workers:
                self._send_updates(self.state.allocate_for_join(worker_id))
        self._send_updates(self.state.rebalance())

    def _send_updates(self, deltas: dict[str, dict[str, list[str]]]) -> None:
        for worker_id, delta in deltas.items():
            link = self.links.get(worker_id)
            if link is None or not (delta["add"] or delta["remove"]):
                continue
            self._post(
                link, pm.AllocationUpdate,
                add_ids=sorted(delta["add"]),
                remove_ids=sorted(delta["remove"]),
            )

    def _broadcast_orders(self) -> None:
        recipients = self.state.order_recipients()
        self._window = {}
        self._window_stale = 0
        self._window_recipients = set(recipients)
        self._window_waiting = set(self.state.barrier_members())
        self._window_open = True
        deadline_ms = int(self.state.straggler_timeout_s() * 1000)
        now_ms = time.monotonic() * 1000.0
        for worker_id in recipients:
            link = self.links.get(worker_id)
            if link is None:
                continue
            kind, amount = self.state.compute_budget(worker_id)
            fields: dict = {"params": self.state.params, "deadline_hint_ms": deadline_ms}
            fields[kind] = amount
            self._order_sent_ms[worker_id] = now_ms
            self._post(link, pm.WorkOrder, **fields)
        for link in self.links.values():
            if link.mode == TRACK:
                self._post(link, pm.ParamBroadcast, params=self.state.params)

    async def _gather_reports(self, t0: float) -> None:
        deadline = t0 + self.state.straggler_timeout_s()
        while self._running and self._window_waiting:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                log.warning("%s: straggler timeout, still waiting on %s",
                            self.project_id, sorted(self._window_waiting))
                break
            await self._wait_wake(remaining)

    async def _sleep_wall(self, t0: float) -> None:
        remaining = t0 + self.state.config.T_seconds - time.monotonic()
        if remaining > 0:
            await asyncio.sleep(remaining)

    def _reduce(self, t0: float) -> None:
        window, stale = self._window, self._window_stale
        self._window_open = False
        self._window = {}
        self._window_waiting = set()
        self._window_recipients = set()
        self._window_stale = 0
        wall_ms = (time.monotonic() - t0) * 1000.0
        record = self.state.apply_reduce(window, stale_count=stale, wall_ms=wall_ms)
        self.records.append(record)
        log.info("%s: iteration %d: %d reports, %d examples, %.0f ms",
                 self.project_id, record.iteration, record.reports_received,
                 record.total_examples, record.wall_ms)
        for q in list(self._subscribers):
            try:
                q.put_nowait(record)
            except asyncio.QueueFull:
                pass
        for link in self.links.values():
            if link.mode == TRACK:
                self._post(link, pm.Telemetry, record=record)

    async def _pings(self) -> None:
        while self._running:
            await asyncio.sleep(self.state.config.T_seconds)
            now = time.monotonic()
            cutoff = 3.0 * self.state.config.T_seconds
            for worker_id, link in list(self.links.items()):
                last = self._last_contact.get(worker_id, now)
                if now - last > cutoff:
                    self.detach(worker_id, reason="missed pings")
                    task = asyncio.create_task(link.close())
                    self._track(task)
                else:
                    self._post(link, pm.Ping, sent_at_ms=int(time.time() * 1000))

    # -- plumbing -------------------------------------------------------------------

    def _touch(self, worker_id: str) -> None:
        self._last_contact[worker_id] = time.monotonic()

    async def _wait_wake(self, timeout: float) -> None:
        try:
            await asyncio.wait_for(self._wake.wait(), timeout)
        except asyncio.TimeoutError:
            pass
        self._wake.clear()

    def _post(self, link: WorkerLink, cls, **fields) -> None:
        """Queue a send; a failed transport detaches the peer, never the loop."""
        async def go():
            try:
                await link.post(cls, **fields)
            except asyncio.CancelledError:
                raise
            except Exception as e:
                log.info("%s: send to %s failed (%s)", self.project_id, link.worker_id, e)
                self.detach(link.worker_id, reason="send failed")
                try:
                    await link.close()
                except Exception:
                    pass
        self._track(asyncio.create_task(go()))

    def _track(self, task: asyncio.Task) -> None:
        self._send_tasks.add(task)
        task.add_done_callback(self._send_tasks.discard)
