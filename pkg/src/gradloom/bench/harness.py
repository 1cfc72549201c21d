"""Multi-process experiment drivers.

Spawns the coordinator, datastore, and workers as real child processes
(the same entry points operators use), steers them over HTTP, and turns
the telemetry stream into CSV rows plus rendered figures.
"""

from __future__ import annotations

import csv
import json
import logging
import queue
import statistics
import subprocess
import sys
import tempfile
import threading
import time
from pathlib import Path

import httpx
import numpy as np

from gradloom.bench import data as bench_data
from gradloom.nn.spec import (
    NetworkSpec, conv_layer, fc_layer, input_layer, pool_layer, relu_layer,
    softmax_layer,
)

log = logging.getLogger("gradloom.bench")

START_TIMEOUT = 20.0
JOIN_TIMEOUT = 60.0


class HarnessError(RuntimeError):
    pass


class Service:
    """One supervised child process with line-buffered stdout capture."""

    def __init__(self, name: str, proc: subprocess.Popen):
        self.name = name
        self.proc = proc
        self.lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()

    @classmethod
    def spawn(cls, name: str, args: list[str]) -> "Service":
        proc = subprocess.Popen(
            [sys.executable, "-m", "gradloom", "--log-level", "warning", *args],
            stdout=subprocess.PIPE,
            text=True,
        )
        return cls(name, proc)

    def _pump(self) -> None:
        for line in self.proc.stdout:
            self.lines.put(line.rstrip("\n"))
        self.lines.put(None)

    def wait_event(self, event: str, timeout: float = START_TIMEOUT) -> dict:
        """Block until the child prints a JSON line with the given event tag."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise HarnessError(f"{self.name}: no {event!r} line within {timeout}s")
            try:
                line = self.lines.get(timeout=remaining)
            except queue.Empty:
                raise HarnessError(
                    f"{self.name}: no {event!r} line within {timeout}s") from None
            if line is None:
                raise HarnessError(
                    f"{self.name}: exited (code {self.proc.poll()}) before {event!r}")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict) and obj.get("event") == event:
                return obj

    def alive(self) -> bool:
        return self.proc.poll() is None

    def stop(self, grace: float = 5.0) -> None:
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(grace)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()


def start_datastore(root: str | Path) -> tuple[Service, str]:
    svc = Service.spawn("datastore", ["datastore", "--dir", str(root), "--port", "0"])
    info = svc.wait_event("listening")
    return svc, f"http://127.0.0.1:{info['port']}"


def start_coordinator() -> tuple[Service, str]:
    svc = Service.spawn("coordinator", ["coordinator", "--port", "0"])
    info = svc.wait_event("listening")
    return svc, f"http://127.0.0.1:{info['port']}"


def start_worker(
    coordinator_url: str,
    project_id: str,
    worker_id: str,
    datastore_url: str | None = None,
    mode: str = "train",
    capacity: int = 3000,
    throttle_ms: float = 0.0,
    test_dir: str | Path | None = None,
) -> Service:
    args = [
        "worker", "--coordinator", coordinator_url, "--project", project_id,
        "--id", worker_id, "--mode", mode, "--capacity", str(capacity),
    ]
    if datastore_url:
        args += ["--datastore", datastore_url]
    if throttle_ms:
        args += ["--throttle-ms", str(throttle_ms)]
    if test_dir:
        args += ["--test-dir", str(test_dir)]
    return Service.spawn(worker_id, args)


# -- HTTP steering ----------------------------------------------------------------


def create_project(base: str, config: dict) -> dict:
    r = httpx.post(f"{base}/projects", json=config, timeout=10)
    r.raise_for_status()
    return r.json()


def ingest_dataset(datastore_base: str, dataset_id: str, zip_bytes: bytes) -> dict:
    r = httpx.post(
        f"{datastore_base}/datasets",
        params={"dataset_id": dataset_id},
        content=zip_bytes,
        timeout=60,
    )
    r.raise_for_status()
    return r.json()

def register_dataset(base: str, project_id: str, datastore_base: str,
                     dataset_id: str) -> dict:
    r = httpx.post(
        f"{base}/projects/{project_id}/datasets",
        json={"datastore_url": datastore_base, "dataset_id": dataset_id},
        timeout=60,
    )
    r.raise_for_status()
    return r.json()


def poll_status(base: str, project_id: str, pred, timeout: float,
                interval: float = 0.25) -> dict:
    deadline = time.monotonic() + timeout
    while True:
        status = httpx.get(f"{base}/projects/{project_id}", timeout=10).json()
        if pred(status):
            return status
        if time.monotonic() > deadline:
            raise HarnessError(f"{project_id}: condition not reached in {timeout}s")
        time.sleep(interval)


def read_records(base: str, project_id: str, count: int, timeout: float,
                 stop_when=None) -> list[dict]:
    """Collect the first `count` telemetry records (backlog, then live).

    stop_when(record) may end the collection early.
    """
    records: list[dict] = []
    deadline = time.monotonic() + timeout
    try:
        with httpx.stream(
            "GET", f"{base}/projects/{project_id}/telemetry",
            timeout=httpx.Timeout(10, read=30),
        ) as resp:
            resp.raise_for_status()
            for line in resp.iter_lines():
                if line.startswith("data: "):
                    record = json.loads(line[len("data: "):])
                    records.append(record)
                    if stop_when is not None and stop_when(record):
                        return records
                    if len(records) >= count:
                        return records
                if time.monotonic() > deadline:
                    raise HarnessError(
                        f"{project_id}: {len(records)}/{count} records in {timeout}s")
    except httpx.HTTPError as e:
        raise HarnessError(f"{project_id}: telemetry stream failed: {e}") from None
    raise HarnessError(f"{project_id}: telemetry ended at {len(records)}/{count}")


# -- experiments ------------------------------------------------------------------

SCALING_LABELS = ["a", "b", "c"]
SCALING_SHAPE = (12, 12, 1)


def scaling_spec() -> NetworkSpec:
    w, h, d = SCALING_SHAPE
    return NetworkSpec([
        input_layer(w, h, d),
        fc_layer(32),
        relu_layer(),
        softmax_layer(SCALING_LABELS),
    ])


def digits_spec(labels: list[str]) -> NetworkSpec:
    return NetworkSpec([
        input_layer(28, 28, 1),
        conv_layer(16, 5),
        relu_layer(),
        pool_layer(2, 2),
        softmax_layer(labels),
    ])


def _write_csv(path: Path, header: list[str], rows: list[tuple]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _plot_scaling(path: Path, rows: list[tuple]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ns = [r[0] for r in rows]
    power = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(ns, power, "o-", label="measured")
    if power:
        ax.plot(ns, [power[0] * n / ns[0] for n in ns], "--", color="gray",
                label="linear reference")
    ax.set_xlabel("workers")
    ax.set_ylabel("power (examples/s)")
    ax.set_xticks(ns)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_convergence(path: Path, rows: list[tuple]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot([r[0] for r in rows], [r[1] for r in rows], "-")
    ax.set_xlabel("iteration")
    ax.set_ylabel("test error")
    ax.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _all_ready(n: int):
    def pred(status: dict) -> bool:
        trainers = [w for w in status["workers"] if w["mode"] == "train"]
        return len(trainers) >= n and all(w["cache_ready"] for w in trainers)
    return pred


def run_scaling(
    worker_counts: list[int],
    iterations: int,
    T: float,
    out_dir: str | Path,
    dataset_size: int = 2400,
    capacity: int = 3000,
    warmup: int = 5,
    seed: int = 7,
) -> tuple[list[tuple], list[int]]:
    """One throughput run per worker count; returns (csv rows, aborted counts)."""
    if iterations <= warmup:
        raise HarnessError(f"need more than {warmup} iterations to measure")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows: list[tuple] = []
    aborted: list[int] = []
    with tempfile.TemporaryDirectory(prefix="gradloom-bench-") as tmp:
        ds = co = None
        workers: list[Service] = []
        try:
            ds, ds_url = start_datastore(tmp)
            co, co_url = start_coordinator()
            items = bench_data.synth_vectors(
                dataset_size, SCALING_LABELS, SCALING_SHAPE, seed=seed)
            ingest_dataset(ds_url, "synth", bench_data.build_zip(items))
            for n in worker_counts:
                pid = f"scaling-{n}"
                create_project(co_url, {
                    "project_id": pid,
                    "spec": scaling_spec().to_obj(),
                    "T_seconds": T,
                    "per_worker_cap": capacity,
                    "seed": seed,
                })
                register_dataset(co_url, pid, ds_url, "synth")
                workers = [
                    start_worker(co_url, pid, f"w{i}", ds_url, capacity=capacity)
                    for i in range(n)
                ]
                try:
                    poll_status(co_url, pid, _all_ready(n), JOIN_TIMEOUT)
                    budget = (iterations + warmup) * (T + 4) + 60
                    records = read_records(co_url, pid, iterations, budget)
                except HarnessError as e:
                    log.error("scaling n=%d aborted: %s", n, e)
                    aborted.append(n)
                    continue
                finally:
                    for w in workers:
                        w.stop()
                    workers = []
                measured = records[warmup:]
                lat = [
                    w["latency_ewma_ms"]
                    for r in measured for w in r["workers"].values()
                ]
                rows.append((
                    n,
                    round(statistics.fmean(r["power"] for r in measured), 3),
                    round(statistics.fmean(lat), 3) if lat else 0.0,
                    round(float(np.percentile(lat, 95)), 3) if lat else 0.0,
                ))
                log.info("scaling n=%d: power=%.1f ex/s", n, rows[-1][1])
        finally:
            for w in workers:
                w.stop()
            for svc in (co, ds):
                if svc:
                    svc.stop()
    _write_csv(out / "scaling.csv",
               ["n", "power", "mean_latency_ms", "p95_latency_ms"], rows)
    _plot_scaling(out / "scaling.png", rows)
    return rows, aborted


def run_convergence(
    n_workers: int,
    iterations: int,
    out_dir: str | Path,
    train_dir: str | Path | None = None,
    test_dir: str | Path | None = None,
    train_count: int = 2000,
    test_count: int = 400,
    T: float = 2.0,
    learning_rate: float | None = None,
    capacity: int = 3000,
    seed: int = 0,
) -> list[tuple]:
    """Train on a digit corpus with a tracker sampling test error."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if train_dir is None:
        train_dir = out / "digits-train"
        if not train_dir.exists():
            log.info("rendering %d training digits into %s", train_count, train_dir)
            bench_data.write_digit_corpus(train_dir, train_count, seed=seed)
    if test_dir is None:
        test_dir = out / "digits-test"
        if not test_dir.exists():
            log.info("rendering %d test digits into %s", test_count, test_dir)
            bench_data.write_digit_corpus(test_dir, test_count, seed=seed + 1)

    rows: list[tuple] = []
    with tempfile.TemporaryDirectory(prefix="gradloom-bench-") as tmp:
        ds = co = None
        workers: list[Service] = []
        try:
            ds, ds_url = start_datastore(tmp)
            co, co_url = start_coordinator()
            manifest = ingest_dataset(
                ds_url, "train", bench_data.zip_labeled_dir(train_dir))
            pid = "convergence"
            config = {
                "project_id": pid,
                "spec": digits_spec(manifest["label_set"]).to_obj(),
                "T_seconds": T,
                "per_worker_cap": capacity,
                "seed": seed,
            }
            if learning_rate is not None:
                config["hyper"] = {"learning_rate": learning_rate}
            create_project(co_url, config)
            register_dataset(co_url, pid, ds_url, "train")
            workers = [
                start_worker(co_url, pid, f"w{i}", ds_url, capacity=capacity)
                for i in range(n_workers)
            ]
            workers.append(start_worker(
                co_url, pid, "tracker", mode="track", test_dir=test_dir))
            poll_status(co_url, pid, _all_ready(n_workers), JOIN_TIMEOUT)
            budget = iterations * (T + 6) + 120
            records = read_records(co_url, pid, iterations, budget)
        finally:
            for w in workers:
                w.stop()
            for svc in (co, ds):
                if svc:
                    svc.stop()
    for r in records:
        if "test_error" in r.get("metrics", {}):
            rows.append((r["iteration"], r["metrics"]["test_error"]))
    _write_csv(out / "convergence.csv", ["iteration", "test_error"], rows)
    _plot_convergence(out / "convergence.png", rows)
    return rows
