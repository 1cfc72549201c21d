"""Local data cache: tracks which ids this worker owns, fetches the bytes in
shard batches, and hands decoded tensors to the compute path.

Qualified ids look like "dataset/00000042": the prefix names the dataset on
the data server, the integer is the id within that dataset's manifest.
"""

from __future__ import annotations

import threading
from pathlib import Path

import numpy as np

from gradloom.datastore.decode import DecodeError, decode_item
from gradloom.datastore.store import SUPPORTED_SUFFIXES, read_shard

DEFAULT_SHARD_BATCH = 256


class CacheError(RuntimeError):
    pass


def split_qualified(qualified_id: str) -> tuple[str, int]:
    dataset_id, _, tail = qualified_id.rpartition("/")
    if not dataset_id:
        raise CacheError(f"id {qualified_id!r} is not dataset-qualified")
    try:
        return dataset_id, int(tail)
    except ValueError:
        raise CacheError(f"id {qualified_id!r} has a non-integer tail") from None


class WorkerCache:
    """Decoded examples keyed by qualified id.

    Thread contract: the sync path mutates under the internal lock; compute
    takes `snapshot()` and works on the copy. Stored arrays are never
    modified after insertion.
    """

    def __init__(self, batch_size: int = DEFAULT_SHARD_BATCH):
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        self.batch_size = batch_size
        self.allocated: set[str] = set()
        self._items: dict[str, tuple[str, np.ndarray]] = {}
        self._lock = threading.Lock()

    def apply_update(self, add_ids, remove_ids) -> None:
        # removal wins when both sides name the same id
        with self._lock:
            self.allocated.update(add_ids)
            for qid in remove_ids:
                self.allocated.discard(qid)
                self._items.pop(qid, None)

    def drop(self, qualified_ids) -> None:
        """Forget ids the datastore could not serve so sync can settle."""
        with self._lock:
            for qid in qualified_ids:
                self.allocated.discard(qid)
                self._items.pop(qid, None)

    def missing(self) -> list[str]:
        with self._lock:
            return sorted(self.allocated - self._items.keys())

    def plan_fetches(self) -> list[tuple[str, list[int]]]:
        """Group missing ids by dataset, in batches of at most batch_size."""
        by_dataset: dict[str, list[int]] = {}
        for qid in self.missing():
            dataset_id, n = split_qualified(qid)
            by_dataset.setdefault(dataset_id, []).append(n)
        plan = []
        for dataset_id in sorted(by_dataset):
            ids = sorted(by_dataset[dataset_id])
            for i in range(0, len(ids), self.batch_size):
                plan.append((dataset_id, ids[i:i + self.batch_size]))
        return plan

    def ingest_shard(self, dataset_id: str, shard_bytes: bytes) -> int:
        """Decode a shard; items whose ids were removed meanwhile are dropped."""
        stored = 0
        for n, label, name, blob in read_shard(shard_bytes):
            qid = f"{dataset_id}/{n:08d}"
            try:
                arr = decode_item(blob, item=name)
            except DecodeError as e:
                raise CacheError(str(e)) from None
            with self._lock:
                if qid in self.allocated:
                    self._items[qid] = (label, arr)
                    stored += 1
        return stored

    @property
    def complete(self) -> bool:
        with self._lock:
            return self.allocated <= self._items.keys()

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    @property
    def bytes_used(self) -> int:
        with self._lock:
            return sum(arr.nbytes for _, arr in self._items.values())

    def snapshot(self) -> dict[str, tuple[str, np.ndarray]]:
        """Only ids both allocated and cached: never train on revoked data."""
        with self._lock:
            return {
                qid: self._items[qid]
                for qid in self.allocated
                if qid in self._items
            }

    def reset_allocation(self) -> None:
        """New session: the coordinator will re-state what this worker owns.

        Cached items are kept so re-granted ids need no refetch; prune()
        clears the rest once the new allocation has settled.
        """
        with self._lock:
            self.allocated.clear()

    def prune(self) -> int:
        with self._lock:
            stray = [qid for qid in self._items if qid not in self.allocated]
            for qid in stray:
                del self._items[qid]
            return len(stray)


def load_labeled_dir(path: str | Path) -> list[tuple[str, np.ndarray]]:
    """Read a subdir-per-label tree (the ingest layout) into decoded items."""
    root = Path(path)
    if not root.is_dir():
        raise CacheError(f"{root} is not a directory")
    items = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        for f in sorted(sub.rglob("*")):
            if f.is_file() and f.suffix.lower() in SUPPORTED_SUFFIXES:
                items.append((sub.name, decode_item(f.read_bytes(), item=str(f))))
    if not items:
        raise CacheError(f"no usable files under {root}")
    return items
