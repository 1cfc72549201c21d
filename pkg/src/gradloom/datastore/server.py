"""HTTP face of the dataset store."""

from __future__ import annotations

from fastapi import FastAPI, HTTPException, Query, Request, Response

from gradloom.datastore.store import DatasetStore, IngestError, ShardError


def make_app(store: DatasetStore) -> FastAPI:
    app = FastAPI(title="gradloom datastore")

    @app.get("/datasets")
    def list_datasets():
        return {"datasets": store.dataset_ids()}

    @app.post("/datasets")
    async def ingest(request: Request, dataset_id: str = Query(...)):
        body = await request.body()
        try:
            return store.ingest_zip(body, dataset_id)
        except IngestError as e:
            raise HTTPException(status_code=400, detail=str(e)) from None

    @app.get("/datasets/{dataset_id}/manifest")
    def manifest(dataset_id: str):
        try:
            return store.load_manifest(dataset_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown dataset {dataset_id!r}") from None

    @app.post("/datasets/{dataset_id}/shard")
    def shard(dataset_id: str, ids: list[int]):
        try:
            data = store.get_shard(dataset_id, ids)
        except ShardError as e:
            raise HTTPException(
                status_code=404, detail={"missing": e.missing[:100]}
            ) from None
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown dataset {dataset_id!r}") from None
        return Response(content=data, media_type="application/zip")

    return app
