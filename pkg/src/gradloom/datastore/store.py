"""Dataset ingestion and shard packing.

A dataset arrives as a zip whose first-level directory names are class
labels. Every usable file gets a dense integer id in lexicographic path
order, so the same zip always produces the same manifest. Blobs are stored
undecoded; shards re-pack requested blobs into a zip whose bytes depend only
on the requested id set.
"""

from __future__ import annotations

import io
import json
import logging
import re
import zipfile
from pathlib import Path

log = logging.getLogger("gradloom.datastore")

SUPPORTED_SUFFIXES = (".png", ".mlb1")
DATASET_ID_RE = re.compile(r"^[A-Za-z0-9_-]+$")
# fixed timestamp so shard bytes never depend on the wall clock
_EPOCH = (1980, 1, 1, 0, 0, 0)


class IngestError(ValueError):
    pass


class ShardError(KeyError):
    def __init__(self, missing: list[int]):
        super().__init__(f"unknown ids: {missing[:20]}")
        self.missing = missing


class DatasetStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def dataset_ids(self) -> list[str]:
        return sorted(
            p.name for p in self.root.iterdir()
            if p.is_dir() and (p / "manifest.json").exists()
        )

    def ingest_zip(self, zip_data: bytes, dataset_id: str) -> dict:
        if not DATASET_ID_RE.match(dataset_id):
            raise IngestError(f"invalid dataset id {dataset_id!r}")
        target = self.root / dataset_id
        if target.exists():
            raise IngestError(f"dataset {dataset_id!r} already exists")
        try:
            zf = zipfile.ZipFile(io.BytesIO(zip_data))
        except zipfile.BadZipFile as e:
            raise IngestError(f"not a zip file: {e}") from None

        usable: list[tuple[str, str, str]] = []  # (path, label, filename)
        skipped = 0
        for info in sorted(zf.infolist(), key=lambda i: i.filename):
            if info.is_dir():
                continue
            parts = info.filename.split("/")
            name = parts[-1]
            if len(parts) < 2 or not parts[0] or name.startswith("."):
                skipped += 1
                log.warning("skipping %s: not under a label directory", info.filename)
                continue
            if not name.lower().endswith(SUPPORTED_SUFFIXES):
                skipped += 1
                log.warning("skipping %s: unsupported file type", info.filename)
                continue
            usable.append((info.filename, parts[0], name))
        if not usable:
            raise IngestError("zip contains no usable items")

        blobs = target / "blobs"
        blobs.mkdir(parents=True)
        entries = []
        for i, (path, label, name) in enumerate(usable):
            data = zf.read(path)
            suffix = Path(name).suffix.lower()
            (blobs / f"{i:08d}{suffix}").write_bytes(data)
            entries.append(
                {"id": i, "label": label, "byte_size": len(data), "name": name}
            )
        manifest = {
            "dataset_id": dataset_id,
            "entries": entries,
            "label_set": sorted({e["label"] for e in entries}),
            "skipped": skipped,
        }
        (target / "manifest.json").write_text(json.dumps(manifest, indent=1))
        log.info("ingested %s: %d items, %d labels, %d skipped",
                 dataset_id, len(entries), len(manifest["label_set"]), skipped)
        return manifest

    def load_manifest(self, dataset_id: str) -> dict:
        path = self.root / dataset_id / "manifest.json"
        if not path.exists():
            raise KeyError(f"unknown dataset {dataset_id!r}")
        return json.loads(path.read_text())

    def get_shard(self, dataset_id: str, ids: list[int]) -> bytes:
        manifest = self.load_manifest(dataset_id)
        by_id = {e["id"]: e for e in manifest["entries"]}
        wanted = sorted(set(ids))
        missing = [i for i in wanted if i not in by_id]
        if missing:
            raise ShardError(missing)
        blobs = self.root / dataset_id / "blobs"
        buf = io.BytesIO()
        with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
            for i in wanted:
                entry = by_id[i]
                suffix = Path(entry["name"]).suffix.lower()
                data = (blobs / f"{i:08d}{suffix}").read_bytes()
                info = zipfile.ZipInfo(
                    f"{i:08d}/{entry['label']}/{entry['name']}", date_time=_EPOCH
                )
                zf.writestr(info, data)
        return buf.getvalue()


def read_shard(data: bytes) -> list[tuple[int, str, str, bytes]]:
    """Unpack a shard into (id, label, name, blob) tuples, ascending by id."""
    zf = zipfile.ZipFile(io.BytesIO(data))
    out = []
    for info in sorted(zf.infolist(), key=lambda i: i.filename):
        if info.is_dir():
            continue
        ordinal, label, name = info.filename.split("/", 2)
        out.append((int(ordinal), label, name, zf.read(info)))
    return out
