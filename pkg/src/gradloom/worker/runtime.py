"""Worker process runtime: one WebSocket session to the coordinator, a
compute thread for budget windows and evaluations, and a cache sync path
against the data server.

The control connection never blocks on math: orders are handed to the
compute thread through an ordered queue, results come back through the
event loop, and every outbound message goes through one sender task so
msg_seq stays strictly increasing.
"""

from __future__ import annotations

import asyncio
import json
import logging
import queue
import threading

import httpx
import websockets

from gradloom import PROTOCOL_VERSION
from gradloom.nn.network import build_network
from gradloom.protocol import messages as pm
from gradloom.protocol.framing import FrameDecoder, FrameError, encode_frame
from gradloom.worker.cache import DEFAULT_SHARD_BATCH, WorkerCache
from gradloom.worker.compute import evaluate, train_budget

log = logging.getLogger("gradloom.worker")

TRAIN, TRACK, PREDICT = "train", "track", "predict"

EXIT_OK = 0
EXIT_RUNTIME = 2


class WorkerSession:
    def __init__(
        self,
        coordinator_url: str,
        project_id: str,
        worker_id: str,
        mode: str = TRAIN,
        capacity: int = 3000,
        datastore_url: str | None = None,
        test_items: list | None = None,
        predict_blobs: list[tuple[str, bytes]] | None = None,
        throttle_ms: float = 0.0,
        batch_size: int = DEFAULT_SHARD_BATCH,
        max_connect_attempts: int = 5,
    ):
        if mode not in (TRAIN, TRACK, PREDICT):
            raise ValueError(f"unknown mode {mode!r}")
        self.ws_url = coordinator_url.rstrip("/")
        for scheme, repl in (("http://", "ws://"), ("https://", "wss://")):
            if self.ws_url.startswith(scheme):
                self.ws_url = repl + self.ws_url[len(scheme):]
        self.ws_url += "/ws"
        self.project_id = project_id
        self.worker_id = worker_id
        self.mode = mode
        self.capacity = capacity
        self.datastore_url = datastore_url.rstrip("/") if datastore_url else None
        self.test_items = test_items or []
        self.predict_blobs = predict_blobs or []
        self.throttle_ms = throttle_ms
        self.max_connect_attempts = max_connect_attempts

        self.cache = WorkerCache(batch_size=batch_size)
        self.net = None
        self.params = None
        self.hyper = None
        self._seq = 0
        self._last_iteration = 0
        self._eval_busy = False
        self._exit_code = EXIT_OK
        self._done = asyncio.Event()
        self._send_q: asyncio.Queue = asyncio.Queue()
        self._predict_replies: asyncio.Queue = asyncio.Queue()
        self._predict_done = False
        self._inbox: queue.Queue = queue.Queue()
        self._sync_needed = asyncio.Event()
        self._loop: asyncio.AbstractEventLoop | None = None

    # -- lifecycle -------------------------------------------------------------

    async def run(self) -> int:
        self._loop = asyncio.get_running_loop()
        thread = threading.Thread(target=self._compute_main, daemon=True)
        thread.start()
        try:
            for attempt in range(self.max_connect_attempts):
                if attempt:
                    delay = min(0.5 * 2 ** (attempt - 1), 8.0)
                    log.info("%s: retrying in %.1fs", self.worker_id, delay)
                    await asyncio.sleep(delay)
                try:
                    async with websockets.connect(self.ws_url, max_size=None) as ws:
                        await self._session(ws)
                except (OSError, websockets.exceptions.WebSocketException) as e:
                    if self._done.is_set():
                        return self._exit_code
                    log.warning("%s: connection failed: %s", self.worker_id, e)
                    continue
                return self._exit_code
            log.error("%s: gave up after %d attempts", self.worker_id,
                      self.max_connect_attempts)
            return EXIT_RUNTIME
        finally:
            self._inbox.put(None)
            thread.join(timeout=5)

    async def _session(self, ws) -> None:
        self._done.clear()
        self.cache.reset_allocation()
        decoder = FrameDecoder()
        tracker = pm.SequenceTracker()
        sender = asyncio.create_task(self._sender(ws))
        syncer = asyncio.create_task(self._sync_loop())
        self._send(pm.Join, worker_id=self.worker_id, mode=self.mode,
                   capacity=self.capacity)
        try:
            async for raw in ws:
                if isinstance(raw, str):
                    self._send(pm.Bye, reason="binary frames only")
                    self._exit_code = EXIT_RUNTIME
                    self._done.set()
                    return
                try:
                    payloads = decoder.feed(raw)
                    msgs = [pm.decode(p) for p in payloads]
                except (FrameError, pm.ProtocolError) as e:
                    log.error("%s: unreadable traffic: %s", self.worker_id, e)
                    self._exit_code = EXIT_RUNTIME
                    self._done.set()
                    return
                for msg in msgs:
                    if not tracker.accept(msg):
                        log.error("%s: coordinator seq went backwards", self.worker_id)
                        self._exit_code = EXIT_RUNTIME
                        self._done.set()
                        return
                    if not await self._dispatch(msg):
                        return
        finally:
            await self._flush_sends()
            for task in (sender, syncer):
                task.cancel()
            await asyncio.gather(sender, syncer, return_exceptions=True)

    async def _flush_sends(self) -> None:
        for _ in range(100):
            if self._send_q.empty():
                return
            await asyncio.sleep(0.01)

    # -- inbound ---------------------------------------------------------------

    async def _dispatch(self, msg: pm.Message) -> bool:
        if isinstance(msg, pm.Welcome):
            if msg.protocol_version != PROTOCOL_VERSION:
                log.error("%s: protocol version %s != %s, leaving", self.worker_id,
                          msg.protocol_version, PROTOCOL_VERSION)
                self._send(pm.Bye, reason="protocol version mismatch")
                self._exit_code = EXIT_RUNTIME
                self._done.set()
                return False
            first = self.net is None
            self.net, _, _ = build_network(msg.spec, seed=0)
            self.hyper = msg.hyper
            self.params = msg.params
            log.info("%s: welcomed to %s (%d labels, params v%d)", self.worker_id,
                     self.project_id, len(self.net.labels), msg.params.version)
            if first and self.mode == PREDICT:
                asyncio.create_task(self._predict_and_leave())
        elif isinstance(msg, pm.AllocationUpdate):
            self.cache.apply_update(msg.add_ids, msg.remove_ids)
            self._sync_needed.set()
        elif isinstance(msg, pm.WorkOrder):
            self.params = msg.params
            self._inbox.put((
                "order", self.net, msg.params, self.hyper,
                self.cache.snapshot(), msg.budget_ms, msg.steps,
            ))
        elif isinstance(msg, pm.ParamBroadcast):
            self.params = msg.params
            if self.mode == TRACK and self.test_items and not self._eval_busy:
                self._eval_busy = True
                self._inbox.put(
                    ("eval", self.net, msg.params, self._last_iteration)
                )
        elif isinstance(msg, pm.Telemetry):
            if msg.record is not None:
                self._last_iteration = msg.record.iteration
        elif isinstance(msg, pm.HyperUpdate):
            if msg.hyper is not None:
                self.hyper = msg.hyper
        elif isinstance(msg, pm.Ping):
            self._send(pm.Pong, sent_at_ms=msg.sent_at_ms)
        elif isinstance(msg, pm.PredictResponse):
            self._predict_replies.put_nowait(msg)
        elif isinstance(msg, pm.Bye):
            log.info("%s: coordinator closed the session: %s", self.worker_id,
                     msg.reason)
            if self.net is None:
                # rejected before the welcome
                self._exit_code = EXIT_RUNTIME
            elif self.mode == PREDICT and not self._predict_done:
                # cut off with answers still owed (bad input, say)
                log.error("%s: dismissed before all predictions were answered",
                          self.worker_id)
                self._exit_code = EXIT_RUNTIME
            self._done.set()
            return False
        return True

    # -- outbound ---------------------------------------------------------------

    def _send(self, cls, **fields) -> None:
        self._send_q.put_nowait((cls, fields))

    def _send_threadsafe(self, cls, **fields) -> None:
        self._loop.call_soon_threadsafe(self._send_q.put_nowait, (cls, fields))

    async def _sender(self, ws) -> None:
        while True:
            cls, fields = await self._send_q.get()
            msg = cls(self.project_id, self.worker_id, self._seq, **fields)
            self._seq += 1
            await ws.send(encode_frame(pm.encode(msg)))

    # -- cache sync --------------------------------------------------------------

    async def _sync_loop(self) -> None:
        while True:
            await self._sync_needed.wait()
            self._sync_needed.clear()
            try:
                await self._sync_once()
            except Exception as e:
                log.warning("%s: cache sync failed, will retry: %s",
                            self.worker_id, e)
                await asyncio.sleep(1.0)
                self._sync_needed.set()

    async def _sync_once(self) -> None:
        if self.datastore_url is None:
            if self.cache.missing():
                log.warning("%s: %d ids needed but no datastore configured",
                            self.worker_id, len(self.cache.missing()))
            return
        async with httpx.AsyncClient(timeout=30.0) as client:
            while True:
                plan = self.cache.plan_fetches()
                if not plan:
                    break
                for dataset_id, ids in plan:
                    resp = await client.post(
                        f"{self.datastore_url}/datasets/{dataset_id}/shard",
                        json=ids,
                    )
                    if resp.status_code == 404:
                        missing = resp.json().get("missing", ids)
                        qids = [f"{dataset_id}/{n:08d}" for n in missing]
                        log.warning("%s: datastore lacks %d ids, dropping",
                                    self.worker_id, len(qids))
                        self.cache.drop(qids)
                        self._send(pm.StatsReport, iteration=self._last_iteration,
                                   metric_name="missing_data", value=float(len(qids)))
                        continue
                    resp.raise_for_status()
                    self.cache.ingest_shard(dataset_id, resp.content)
        if self.cache.complete:
            self.cache.prune()
            self._send(pm.StatsReport, iteration=self._last_iteration,
                       metric_name="cache_ready", value=1.0)

    # -- compute thread ------------------------------------------------------------

    def _compute_main(self) -> None:
        cursor: str | None = None
        while True:
            item = self._inbox.get()
            if item is None:
                return
            try:
                kind = item[0]
                if kind == "order":
                    _, net, params, hyper, items, budget_ms, steps = item
                    bundle, cursor, diag = train_budget(
                        net, params, hyper, items, budget_ms, steps, cursor,
                        self.worker_id, throttle_ms=self.throttle_ms,
                    )
                    if bundle is not None:
                        self._send_threadsafe(pm.GradientReport, bundle=bundle)
                    else:
                        log.warning("%s: window aborted: %s", self.worker_id, diag)
                        self._send_threadsafe(
                            pm.StatsReport, iteration=self._last_iteration,
                            metric_name="train_abort", value=1.0,
                        )
                elif kind == "eval":
                    _, net, params, iteration = item
                    error = evaluate(net, params, self.test_items)
                    self._send_threadsafe(pm.StatsReport, iteration=iteration,
                                          metric_name="test_error", value=error)
                    self._loop.call_soon_threadsafe(self._clear_eval_busy)
            except Exception:
                log.exception("%s: compute step failed", self.worker_id)
                if item[0] == "eval":
                    self._loop.call_soon_threadsafe(self._clear_eval_busy)

    def _clear_eval_busy(self) -> None:
        self._eval_busy = False

    # -- predict mode ----------------------------------------------------------------

    async def _predict_and_leave(self) -> None:
        try:
            for name, blob in self.predict_blobs:
                self._send(pm.PredictRequest, image_png=blob)
                reply = await asyncio.wait_for(self._predict_replies.get(), 30.0)
                print(json.dumps({"input": name, "label": reply.label,
                                  "probability": reply.probability}), flush=True)
            self._predict_done = True
            self._send(pm.Bye, reason="predictions done")
        except asyncio.TimeoutError:
            log.error("%s: prediction reply never arrived", self.worker_id)
            self._exit_code = EXIT_RUNTIME
        self._done.set()
