"""Operator command line: service launchers, dataset plumbing, model files,
and the benchmark drivers.

Exit codes: 0 success, 1 usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import asyncio
import base64
import json
import logging
import os
import socket
import sys
from pathlib import Path

log = logging.getLogger("gradloom.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

DEFAULT_COORDINATOR_PORT = 8700
DEFAULT_DATASTORE_PORT = 8701


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags by default; the CLI contract reserves 2
    # for runtime failures, so usage problems get 1.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _serve(app, host: str, port: int, service: str) -> int:
    """Bind first so the startup line carries the real port (port 0 works)."""
    import uvicorn

    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((host, port))
    except (OSError, OverflowError, ValueError) as e:
        log.error("%s: cannot bind %s:%s: %s", service, host, port, e)
        sock.close()
        return EXIT_RUNTIME
    bound = sock.getsockname()[1]
    print(json.dumps(
        {"event": "listening", "service": service, "host": host, "port": bound}
    ), flush=True)
    config = uvicorn.Config(app, host=host, port=bound,
                            log_level="warning", access_log=False)
    uvicorn.Server(config).run(sockets=[sock])
    return EXIT_OK


# -- services ---------------------------------------------------------------------


def cmd_coordinator(args) -> int:
    from gradloom.coordinator.config import ConfigError, ServerConfig
    from gradloom.coordinator.server import Registry, make_app

    try:
        if args.config:
            cfg = ServerConfig.load(args.config)
        else:
            cfg = ServerConfig()
            cfg.apply_env()
    except ConfigError as e:
        args.parser.print_usage(sys.stderr)
        print(f"{args.parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if args.host is not None:
        cfg.host = args.host
    if args.port is not None:
        cfg.port = args.port

    registry = Registry()
    app = make_app(registry)
    if cfg.project is not None:
        project = cfg.project

        async def _boot():
            runtime = registry.create_from_config(project)
            log.info("created project %r from config", runtime.project_id)

        app.router.add_event_handler("startup", _boot)
    return _serve(app, cfg.host, cfg.port, "coordinator")


def cmd_datastore(args) -> int:
    from gradloom.datastore.server import make_app
    from gradloom.datastore.store import DatasetStore

    port = args.port
    if port is None:
        env = os.environ.get("GRADLOOM_DATASTORE_PORT")
        if env:
            try:
                port = int(env)
            except ValueError:
                log.error("GRADLOOM_DATASTORE_PORT is not an integer: %r", env)
                return EXIT_RUNTIME
        else:
            port = DEFAULT_DATASTORE_PORT
    store = DatasetStore(args.dir)
    return _serve(make_app(store), args.host, port, "datastore")


def cmd_worker(args) -> int:
    from gradloom.worker.cache import CacheError, load_labeled_dir
    from gradloom.worker.runtime import PREDICT, TRACK, WorkerSession

    worker_id = args.id or f"w-{os.getpid()}"
    test_items = None
    if args.mode == TRACK:
        if not args.test_dir:
            args.parser.error("--mode track requires --test-dir")
        try:
            test_items = load_labeled_dir(args.test_dir)
        except CacheError as e:
            log.error("%s", e)
            return EXIT_RUNTIME
    predict_blobs = None
    if args.mode == PREDICT:
        if not args.input:
            args.parser.error("--mode predict requires at least one --input")
        try:
            predict_blobs = [(p, Path(p).read_bytes()) for p in args.input]
        except OSError as e:
            log.error("%s", e)
            return EXIT_RUNTIME

    session = WorkerSession(
        coordinator_url=args.coordinator,
        project_id=args.project,
        worker_id=worker_id,
        mode=args.mode,
        capacity=args.capacity,
        datastore_url=args.datastore,
        test_items=test_items,
        predict_blobs=predict_blobs,
        throttle_ms=args.throttle_ms,
    )
    print(json.dumps({
        "event": "starting", "service": "worker", "worker_id": worker_id,
        "mode": args.mode, "project": args.project,
    }), flush=True)
    try:
        return asyncio.run(session.run())
    except KeyboardInterrupt:
        return EXIT_OK


# -- dataset plumbing -------------------------------------------------------------


def cmd_ingest(args) -> int:
    import httpx

    from gradloom.bench.data import zip_labeled_dir
    from gradloom.datastore.store import DatasetStore, IngestError

    if bool(args.zipfile) == bool(args.from_dir):
        args.parser.error("give either a zip file or --from-dir")
    if bool(args.datastore) == bool(args.dir):
        args.parser.error("give either --datastore or --dir")
    if args.register and not (args.coordinator and args.project and args.datastore):
        args.parser.error(
            "--register requires --coordinator, --project, and --datastore")
    try:
        if args.from_dir:
            zip_bytes = zip_labeled_dir(args.from_dir)
        else:
            zip_bytes = Path(args.zipfile).read_bytes()
    except (OSError, ValueError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME

    try:
        if args.datastore:
            r = httpx.post(
                f"{args.datastore.rstrip('/')}/datasets",
                params={"dataset_id": args.dataset_id},
                content=zip_bytes, timeout=120,
            )
            if r.status_code != 200:
                log.error("ingest rejected (%d): %s", r.status_code, r.text)
                return EXIT_RUNTIME
            manifest = r.json()
        else:
            manifest = DatasetStore(args.dir).ingest_zip(zip_bytes, args.dataset_id)
    except (httpx.HTTPError, IngestError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    print(json.dumps({
        "dataset_id": manifest["dataset_id"],
        "items": len(manifest["entries"]),
        "labels": manifest["label_set"],
        "skipped": manifest["skipped"],
    }))

    if args.register:
        r = httpx.post(
            f"{args.coordinator.rstrip('/')}/projects/{args.project}/datasets",
            json={"datastore_url": args.datastore, "dataset_id": args.dataset_id},
            timeout=120,
        )
        if r.status_code != 200:
            log.error("registration rejected (%d): %s", r.status_code, r.text)
            return EXIT_RUNTIME
        print(json.dumps(r.json()))
    return EXIT_OK


def cmd_convert_idx(args) -> int:
    from gradloom.bench.data import convert_idx

    try:
        count = convert_idx(args.images, args.labels, args.out, limit=args.limit)
    except (OSError, ValueError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    print(json.dumps({"converted": count, "out": str(args.out)}))
    return EXIT_OK


def cmd_digits(args) -> int:
    from gradloom.bench.data import write_digit_corpus

    try:
        root = write_digit_corpus(args.out, args.count, seed=args.seed)
    except OSError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    print(json.dumps({"rendered": args.count, "out": str(root)}))
    return EXIT_OK


# -- model files ------------------------------------------------------------------


def cmd_model_save(args) -> int:
    import httpx

    try:
        r = httpx.post(
            f"{args.coordinator.rstrip('/')}/projects/{args.project}/snapshot",
            timeout=60,
        )
    except httpx.HTTPError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    if r.status_code != 200:
        log.error("snapshot rejected (%d): %s", r.status_code, r.text)
        return EXIT_RUNTIME
    # written verbatim so save -> load -> save is byte-identical
    Path(args.out).write_bytes(r.content)
    obj = r.json()
    print(json.dumps({
        "out": args.out, "iteration": obj["iteration"],
        "params_version": obj["params"]["version"],
    }))
    return EXIT_OK


def cmd_model_load(args) -> int:
    import httpx

    try:
        body = json.loads(Path(args.archive).read_text())
    except (OSError, json.JSONDecodeError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    params = {"project_id": args.project} if args.project else {}
    try:
        r = httpx.post(f"{args.coordinator.rstrip('/')}/projects",
                       params=params, json=body, timeout=60)
    except httpx.HTTPError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    if r.status_code != 200:
        log.error("load rejected (%d): %s", r.status_code, r.text)
        return EXIT_RUNTIME
    print(json.dumps(r.json()))
    return EXIT_OK


def cmd_model_predict(args) -> int:
    from gradloom.datastore.decode import DecodeError, decode_item
    from gradloom.nn.archive import ArchiveError, deserialize
    from gradloom.nn.network import build_network
    from gradloom.worker.compute import predict_label

    try:
        archive = deserialize(Path(args.archive).read_bytes())
    except (OSError, ArchiveError) as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    net, _, _ = build_network(archive.spec, seed=archive.seed)
    for path in args.images:
        try:
            arr = decode_item(Path(path).read_bytes(), item=path)
            label, probability = predict_label(net, archive.params, arr)
        except (OSError, DecodeError, ValueError) as e:
            log.error("%s: %s", path, e)
            return EXIT_RUNTIME
        print(json.dumps(
            {"input": path, "label": label, "probability": probability}))
    return EXIT_OK


# -- benchmarks -------------------------------------------------------------------


def _counts(text: str) -> list[int]:
    try:
        counts = [int(p) for p in text.split(",") if p]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated int list: {text!r}")
    if not counts or any(c < 1 for c in counts):
        raise argparse.ArgumentTypeError("worker counts must be positive")
    return counts


def cmd_bench_scaling(args) -> int:
    from gradloom.bench.harness import HarnessError, run_scaling

    try:
        rows, aborted = run_scaling(
            args.workers, args.iterations, args.duration, args.out,
            dataset_size=args.dataset_size, capacity=args.capacity,
            warmup=args.warmup, seed=args.seed,
        )
    except HarnessError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    for row in rows:
        print(json.dumps(dict(zip(
            ("n", "power", "mean_latency_ms", "p95_latency_ms"), row))))
    print(f"wrote {Path(args.out) / 'scaling.csv'} and scaling.png",
          file=sys.stderr)
    if aborted:
        log.error("aborted runs for n in %s", aborted)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bench_convergence(args) -> int:
    from gradloom.bench.harness import HarnessError, run_convergence

    try:
        rows = run_convergence(
            args.workers, args.iterations, args.out,
            train_dir=args.train_dir, test_dir=args.test_dir,
            train_count=args.train_count, test_count=args.test_count,
            T=args.duration, learning_rate=args.learning_rate,
            capacity=args.capacity, seed=args.seed,
        )
    except HarnessError as e:
        log.error("%s", e)
        return EXIT_RUNTIME
    if rows:
        print(json.dumps({"first": rows[0], "last": rows[-1], "samples": len(rows)}))
    print(f"wrote {Path(args.out) / 'convergence.csv'} and convergence.png",
          file=sys.stderr)
    return EXIT_OK


# -- wiring -----------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="gradloom",
                     description="distributed trainer: services and tooling")
    parser.add_argument("--log-level", default="info",
                        choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coordinator", help="run the training master")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None,
                   help="0 picks a free port (printed in the startup line)")
    p.set_defaults(func=cmd_coordinator, parser=p)

    p = sub.add_parser("datastore", help="run the dataset server")
    p.add_argument("--dir", required=True, help="dataset storage root")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_datastore, parser=p)

    p = sub.add_parser("worker", help="run a worker process")
    p.add_argument("--coordinator", required=True, help="coordinator base URL")
    p.add_argument("--project", required=True)
    p.add_argument("--datastore", default=None, help="datastore base URL")
    p.add_argument("--mode", default="train", choices=["train", "track", "predict"])
    p.add_argument("--capacity", type=int, default=3000,
                   help="max cached examples")
    p.add_argument("--id", default=None, help="worker id (default: w-<pid>)")
    p.add_argument("--test-dir", default=None,
                   help="track mode: labeled test set directory")
    p.add_argument("--input", action="append", default=[],
                   help="predict mode: image file (repeatable)")
    p.add_argument("--throttle-ms", type=float, default=0.0,
                   help="sleep per example, simulates a slower device")
    p.set_defaults(func=cmd_worker, parser=p)

    p = sub.add_parser("ingest", help="ingest a labeled dataset")
    p.add_argument("zipfile", nargs="?", help="zip with <label>/<file> entries")
    p.add_argument("--from-dir", default=None,
                   help="build the zip from a subdir-per-label tree")
    p.add_argument("--dataset-id", required=True)
    p.add_argument("--datastore", default=None, help="ingest over HTTP")
    p.add_argument("--dir", default=None, help="ingest into a local storage root")
    p.add_argument("--register", action="store_true",
                   help="also register the dataset with a project")
    p.add_argument("--coordinator", default=None)
    p.add_argument("--project", default=None)
    p.set_defaults(func=cmd_ingest, parser=p)

    p = sub.add_parser("convert-idx", help="convert IDX image/label files")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--limit", type=int, default=None)
    p.set_defaults(func=cmd_convert_idx, parser=p)

    p = sub.add_parser("digits", help="render a synthetic digit corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_digits, parser=p)

    p = sub.add_parser("model", help="snapshot files")
    msub = p.add_subparsers(dest="model_command", required=True)
    m = msub.add_parser("save", help="download a snapshot from a coordinator")
    m.add_argument("--coordinator", required=True)
    m.add_argument("--project", required=True)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_model_save, parser=m)
    m = msub.add_parser("load", help="start a project from an archive")
    m.add_argument("archive")
    m.add_argument("--coordinator", required=True)
    m.add_argument("--project", default=None)
    m.set_defaults(func=cmd_model_load, parser=m)
    m = msub.add_parser("predict", help="classify images with an archive")
    m.add_argument("archive")
    m.add_argument("images", nargs="+")
    m.set_defaults(func=cmd_model_predict, parser=m)

    p = sub.add_parser("bench", help="benchmark drivers")
    bsub = p.add_subparsers(dest="bench_command", required=True)
    b = bsub.add_parser("scaling", help="throughput vs worker count")
    b.add_argument("--workers", type=_counts, default=[1, 2, 4, 8],
                   help="comma-separated counts (default 1,2,4,8)")
    b.add_argument("--iterations", type=int, default=20)
    b.add_argument("--duration", type=float, default=2.0, help="T seconds")
    b.add_argument("--out", default="bench-out")
    b.add_argument("--dataset-size", type=int, default=2400)
    b.add_argument("--capacity", type=int, default=3000)
    b.add_argument("--warmup", type=int, default=5)
    b.add_argument("--seed", type=int, default=7)
    b.set_defaults(func=cmd_bench_scaling, parser=b)
    b = bsub.add_parser("convergence", help="test error over iterations")
    b.add_argument("--workers", type=int, default=4)
    b.add_argument("--iterations", type=int, default=100)
    b.add_argument("--duration", type=float, default=2.0, help="T seconds")
    b.add_argument("--out", default="bench-out")
    b.add_argument("--train-dir", default=None,
                   help="labeled training images (default: rendered digits)")
    b.add_argument("--test-dir", default=None)
    b.add_argument("--train-count", type=int, default=2000,
                   help="rendered corpus size when --train-dir is absent")
    b.add_argument("--test-count", type=int, default=400)
    b.add_argument("--learning-rate", type=float, default=None)
    b.add_argument("--capacity", type=int, default=3000)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench_convergence, parser=b)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        stream=sys.stderr,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    # request-per-line noise drowns the interesting output at the default level
    logging.getLogger("httpx").setLevel(logging.WARNING)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
