"""Control-plane server: WebSocket protocol endpoint plus the HTTP API the
dashboard and operators use. Everything a UI can do is reachable here."""

from __future__ import annotations

import asyncio
import base64
import json
import logging

import httpx
from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import StreamingResponse
from starlette.websockets import WebSocket, WebSocketDisconnect

from gradloom.coordinator.config import ConfigError, ProjectConfig
from gradloom.coordinator.loop import COORDINATOR_ID, ProjectRuntime, WorkerLink
from gradloom.coordinator.state import RegistrationError
from gradloom.nn.archive import ArchiveError, deserialize
from gradloom.nn.tensor import ShapeError, Tensor
from gradloom.protocol import messages as pm
from gradloom.protocol.framing import FrameDecoder, FrameError, encode_frame

log = logging.getLogger("gradloom.coordinator")


class Registry:
    def __init__(self) -> None:
        self.projects: dict[str, ProjectRuntime] = {}

    def create_from_config(self, config: ProjectConfig) -> ProjectRuntime:
        if config.project_id in self.projects:
            raise KeyError(config.project_id)
        runtime = ProjectRuntime(config.project_id, config)
        self.projects[config.project_id] = runtime
        runtime.start()
        return runtime

    def create_from_archive(self, archive, project_id: str) -> ProjectRuntime:
        if project_id in self.projects:
            raise KeyError(project_id)
        config = ProjectConfig(project_id=project_id, spec=archive.spec,
                               hyper=archive.hyper, seed=archive.seed)
        runtime = ProjectRuntime(project_id, config, archive=archive)
        self.projects[project_id] = runtime
        runtime.start()
        return runtime

    def get(self, project_id: str) -> ProjectRuntime:
        try:
            return self.projects[project_id]
        except KeyError:
            raise HTTPException(status_code=404,
                                detail=f"unknown project {project_id!r}") from None

    async def stop_all(self) -> None:
        for runtime in list(self.projects.values()):
            await runtime.stop()


def make_app(registry: Registry | None = None) -> FastAPI:
    # Every handler that touches a runtime must be async: sync handlers get
    # pushed to a threadpool, which would race the iteration tasks.
    registry = registry or Registry()
    app = FastAPI(title="gradloom coordinator")
    app.state.registry = registry
    # Browser dashboards are served from their own origin (static file host),
    # so the control API must answer cross-origin requests.
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.on_event("shutdown")
    async def shutdown():
        await registry.stop_all()

    # -- projects ---------------------------------------------------------------

    @app.get("/projects")
    async def list_projects():
        return {"projects": [r.status() for r in registry.projects.values()]}

    @app.post("/projects")
    async def create_project(body: dict, project_id: str | None = Query(default=None)):
        if "format_version" in body:
            try:
                archive = deserialize(json.dumps(body))
            except ArchiveError as e:
                raise HTTPException(status_code=400, detail=str(e)) from None
            pid = project_id or f"resumed-{len(registry.projects)}"
            try:
                runtime = registry.create_from_archive(archive, pid)
            except KeyError:
                raise HTTPException(status_code=409,
                                    detail=f"project {pid!r} already exists") from None
        else:
            try:
                config = ProjectConfig.from_obj(body)
            except ConfigError as e:
                raise HTTPException(status_code=400, detail=str(e)) from None
            try:
                runtime = registry.create_from_config(config)
            except KeyError as e:
                raise HTTPException(status_code=409,
                                    detail=f"project {e.args[0]!r} already exists") from None
        return runtime.status()

    @app.get("/projects/{project_id}")
    async def project_status(project_id: str):
        return registry.get(project_id).status()

    # -- telemetry ---------------------------------------------------------------

    @app.get("/projects/{project_id}/telemetry")
    async def telemetry(project_id: str, request: Request):
        runtime = registry.get(project_id)
        backlog = [r.to_obj() for r in runtime.records]
        queue = runtime.subscribe()

        async def stream():
            try:
                for obj in backlog:
                    yield f"data: {json.dumps(obj)}\n\n"
                while True:
                    if await request.is_disconnected():
                        return
                    try:
                        record = await asyncio.wait_for(queue.get(), timeout=1.0)
                    except asyncio.TimeoutError:
                        yield ": keepalive\n\n"
                        continue
                    yield f"data: {json.dumps(record.to_obj())}\n\n"
            finally:
                runtime.unsubscribe(queue)

        return StreamingResponse(stream(), media_type="text/event-stream")

    # -- steering ------------------------------------------------------------------

    @app.post("/projects/{project_id}/hyper")
    async def set_hyper(project_id: str, body: dict):
        runtime = registry.get(project_id)
        try:
            hyper = runtime.state.hyper.updated(**body)
        except (TypeError, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        runtime.set_hyper(hyper)
        return {"hyper": hyper.to_obj()}

    @app.post("/projects/{project_id}/duration")
    async def set_duration(project_id: str, body: dict):
        runtime = registry.get(project_id)
        try:
            runtime.set_duration(float(body["T_seconds"]))
        except (KeyError, TypeError) as e:
            raise HTTPException(status_code=400, detail=f"need T_seconds: {e}") from None
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return {"T_seconds": runtime.state.config.T_seconds}

    @app.post("/projects/{project_id}/workers/{worker_id}/pause")
    async def pause(project_id: str, worker_id: str):
        return _set_paused(registry.get(project_id), worker_id, True)

    @app.post("/projects/{project_id}/workers/{worker_id}/resume")
    async def resume(project_id: str, worker_id: str):
        return _set_paused(registry.get(project_id), worker_id, False)

    def _set_paused(runtime: ProjectRuntime, worker_id: str, paused: bool):
        try:
            runtime.pause_worker(worker_id, paused)
        except KeyError:
            raise HTTPException(status_code=404,
                                detail=f"unknown worker {worker_id!r}") from None
        return {"worker_id": worker_id, "paused": paused}

    # -- data, snapshots, predictions ---------------------------------------------

    @app.post("/projects/{project_id}/datasets")
    async def register_dataset(project_id: str, body: dict):
        runtime = registry.get(project_id)
        try:
            datastore_url = body["datastore_url"].rstrip("/")
            dataset_id = body["dataset_id"]
        except (KeyError, TypeError, AttributeError):
            raise HTTPException(status_code=400,
                                detail="need datastore_url and dataset_id") from None
        try:
            async with httpx.AsyncClient() as client:
                resp = await client.get(f"{datastore_url}/datasets/{dataset_id}/manifest")
        except httpx.HTTPError as e:
            raise HTTPException(status_code=502, detail=f"datastore unreachable: {e}") from None
        if resp.status_code != 200:
            raise HTTPException(status_code=502,
                                detail=f"datastore returned {resp.status_code}")
        manifest = resp.json()
        entries = [
            (f"{dataset_id}/{e['id']:08d}", e["label"]) for e in manifest["entries"]
        ]
        try:
            new_labels = runtime.register_entries(entries)
        except RegistrationError as e:
            raise HTTPException(status_code=409, detail=str(e)) from None
        return {"registered": len(entries), "new_labels": new_labels}

    @app.post("/projects/{project_id}/snapshot")
    async def snapshot(project_id: str):
        return registry.get(project_id).archive_obj()

    @app.post("/projects/{project_id}/predict")
    async def predict(project_id: str, body: dict):
        runtime = registry.get(project_id)
        tensor = None
        image_png = None
        if "image_png" in body:
            try:
                image_png = base64.b64decode(body["image_png"], validate=True)
            except Exception:
                raise HTTPException(status_code=400,
                                    detail="image_png must be base64") from None
        elif "tensor" in body:
            t = body["tensor"]
            try:
                tensor = Tensor(tuple(t["shape"]), list(t["values"]))
            except (KeyError, TypeError, ShapeError) as e:
                raise HTTPException(status_code=400, detail=f"bad tensor: {e}") from None
        try:
            label, probability = runtime.predict(tensor=tensor, image_png=image_png)
        except ValueError as e:
            raise HTTPException(status_code=400, detail=str(e)) from None
        return {"label": label, "probability": probability}

    # -- protocol endpoint -----------------------------------------------------------

    @app.websocket("/ws")
    async def ws_endpoint(websocket: WebSocket):
        await websocket.accept()
        session = _WsSession(registry, websocket)
        try:
            await session.run()
        except WebSocketDisconnect:
            pass
        finally:
            session.cleanup()

    return app


class _WsLink(WorkerLink):
    def __init__(self, websocket: WebSocket, project_id: str, worker_id: str,
                 mode: str, capacity: int):
        super().__init__(project_id, worker_id, mode, capacity)
        self._ws = websocket

    async def send_raw(self, data: bytes) -> None:
        await self._ws.send_bytes(data)

    async def close(self) -> None:
        try:
            await self._ws.close()
        except Exception:
            pass


class _WsSession:
    """One protocol connection: frame decoding, handshake, dispatch."""

    def __init__(self, registry: Registry, websocket: WebSocket):
        self.registry = registry
        self.ws = websocket
        self.decoder = FrameDecoder()
        self.sequences = pm.SequenceTracker()
        self.runtime: ProjectRuntime | None = None
        self.link: _WsLink | None = None

    async def run(self) -> None:
        while True:
            event = await self.ws.receive()
            if event["type"] == "websocket.disconnect":
                return
            data = event.get("bytes")
            if data is None:
                await self._bye("binary frames only")
                return
            try:
                frames = self.decoder.feed(data)
            except FrameError as e:
                await self._bye(f"framing: {e}")
                return
            for payload in frames:
                try:
                    msg = pm.decode(payload)
                except pm.ProtocolError as e:
                    await self._bye(f"protocol: {e}")
                    return
                if not await self._handle(msg):
                    return

    async def _handle(self, msg: pm.Message) -> bool:
        if not self.sequences.accept(msg):
            await self._bye("msg_seq went backwards")
            return False
        if self.link is None:
            return await self._handshake(msg)
        if msg.project_id != self.link.project_id:
            await self._bye("project_id changed mid-session")
            return False
        runtime, link = self.runtime, self.link
        if isinstance(msg, pm.Join):
            await self._bye("already joined")
            return False
        if isinstance(msg, pm.GradientReport):
            if msg.bundle is not None:
                runtime.on_report(link.worker_id, msg.bundle)
        elif isinstance(msg, pm.StatsReport):
            runtime.on_stats(link.worker_id, msg.metric_name, msg.value)
        elif isinstance(msg, pm.Pong):
            runtime.on_pong(link.worker_id)
        elif isinstance(msg, pm.Ping):
            await link.post(pm.Pong, sent_at_ms=msg.sent_at_ms)
        elif isinstance(msg, pm.HyperUpdate):
            if msg.hyper is not None:
                runtime.set_hyper(msg.hyper)
        elif isinstance(msg, pm.SaveRequest):
            archive = runtime.state.snapshot()
            await link.post(pm.ModelSnapshot, archive=archive)
        elif isinstance(msg, pm.PredictRequest):
            try:
                label, probability = runtime.predict(
                    tensor=msg.tensor, image_png=msg.image_png
                )
            except ValueError as e:
                await self._bye(str(e))
                return False
            await link.post(pm.PredictResponse, label=label, probability=probability)
        elif isinstance(msg, pm.Bye):
            runtime.detach(link.worker_id, reason=f"peer said bye: {msg.reason}")
            self.link = None
            await self.ws.close()
            return False
        else:
            await self._bye(f"unexpected message type {type(msg).__name__}")
            return False
        return True

    async def _handshake(self, msg: pm.Message) -> bool:
        if not isinstance(msg, pm.Join):
            await self._bye("first message must be a join")
            return False
        if msg.mode not in ("train", "track", "predict"):
            await self._bye(f"unknown mode {msg.mode!r}")
            return False
        try:
            runtime = self.registry.projects[msg.project_id]
        except KeyError:
            await self._bye(f"unknown project {msg.project_id!r}")
            return False
        link = _WsLink(self.ws, msg.project_id, msg.worker_id, msg.mode, msg.capacity)
        try:
            welcome = runtime.attach(link)
        except ValueError as e:
            await self._bye(str(e))
            return False
        self.runtime, self.link = runtime, link
        await link.send(welcome)
        return True

    async def _bye(self, reason: str) -> None:
        log.info("ws session closing: %s", reason)
        try:
            if self.link is not None:
                await self.link.post(pm.Bye, reason=reason)
            else:
                msg = pm.Bye("", COORDINATOR_ID, 0, reason=reason)
                await self.ws.send_bytes(encode_frame(pm.encode(msg)))
            await self.ws.close()
        except Exception:
            pass

    def cleanup(self) -> None:
        if self.runtime is not None and self.link is not None:
            self.runtime.detach(self.link.worker_id)
