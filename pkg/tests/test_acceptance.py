"""End-to-end acceptance gate: one test per release criterion.

Each test prints a single "[ACCEPTANCE] <name>: PASS|FAIL|SKIP (<detail>)"
line so a full run reads as a checklist. Process-level tests share one
datastore + coordinator per module; every criterion gets its own project.
"""

import json
import os
import signal
import time

import httpx
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradloom.bench import data as bench_data
from gradloom.bench import harness as hz
from gradloom.coordinator.config import ProjectConfig
from gradloom.coordinator.state import ProjectState
from gradloom.datastore.decode import decode_item
from gradloom.nn import (
    NetworkSpec,
    backward,
    build_network,
    conv_layer,
    fc_layer,
    forward,
    input_layer,
    pool_layer,
    relu_layer,
    softmax_layer,
)
from gradloom.nn.archive import deserialize, serialize
from gradloom.nn.optim import Hyperparams, adagrad_update
from gradloom.nn.params import Params
from gradloom.protocol import framing
from gradloom.protocol import messages as pm
from gradloom.worker.compute import dropout_rng, predict_label

from oracles import finite_difference_grads, max_relative_error, serial_gradient_sum

pytestmark = pytest.mark.acceptance


def report(capsys, name, ok, detail):
    verdict = "PASS" if ok else "FAIL"
    with capsys.disabled():
        print(f"[ACCEPTANCE] {name}: {verdict} ({detail})", flush=True)
    assert ok, f"{name}: {detail}"


def skip(capsys, name, detail):
    with capsys.disabled():
        print(f"[ACCEPTANCE] {name}: SKIP ({detail})", flush=True)
    pytest.skip(detail)


# ---------------------------------------------------------------------------
# gradient correctness: 20 random tiny networks vs central finite differences


def _tiny_specs(rng):
    """20 small architectures; conv, pool, fc, relu, softmax all appear."""
    specs = []
    for i in range(20):
        kind = i % 4
        # pool 2x2 and stride-2 conv windows must tile the input exactly
        side = int(rng.integers(4, 7)) if kind < 2 else int(rng.choice([4, 6]))
        depth = int(rng.integers(1, 3))
        labels = [chr(ord("a") + j) for j in range(int(rng.integers(2, 5)))]
        if kind == 0:
            middle = [fc_layer(int(rng.integers(3, 7)))]
        elif kind == 1:
            middle = [
                fc_layer(int(rng.integers(3, 6))),
                relu_layer(),
                fc_layer(int(rng.integers(3, 6))),
            ]
        elif kind == 2:
            middle = [
                conv_layer(int(rng.integers(1, 4)), 3, stride=1, padding=1),
                pool_layer(2, 2),
                fc_layer(int(rng.integers(3, 6))),
            ]
        else:
            middle = [
                conv_layer(int(rng.integers(1, 4)), 2, stride=2),
                relu_layer(),
                fc_layer(int(rng.integers(3, 6))),
            ]
        specs.append(
            NetworkSpec((input_layer(side, side, depth), *middle, softmax_layer(labels)))
        )
    return specs


def test_analytic_gradients_match_finite_differences(capsys):
    rng = np.random.default_rng(1234)
    worst = 0.0
    biggest = 0
    for i, spec in enumerate(_tiny_specs(rng)):
        net, params, _ = build_network(spec, seed=100 + i)
        n_params = params.arrays.param_count()
        assert n_params <= 500, f"net {i} has {n_params} params"
        biggest = max(biggest, n_params)
        w, h, d = net.input_shape
        x = rng.standard_normal((h, w, d))
        label = int(rng.integers(0, len(net.labels)))

        _, cache = forward(net, params, x, training=True)
        grads, _ = backward(net, params, cache, label)

        def loss_fn():
            _, c = forward(net, params, x, training=True)
            _, loss = backward(net, params, c, label)
            return loss

        fd = finite_difference_grads(loss_fn, list(params.arrays.arrays()))
        err = max_relative_error(
            np.concatenate([g.ravel() for g in grads.arrays()]),
            np.concatenate([g.ravel() for g in fd]),
        )
        worst = max(worst, err)
    report(
        capsys,
        "gradient-correctness",
        worst < 1e-4,
        f"20 nets, largest {biggest} params, max relative error {worst:.3g}",
    )


# ---------------------------------------------------------------------------
# allocation policy: invariants under churn plus the exact headline fractions


def _alloc_spec():
    return NetworkSpec(
        (input_layer(2, 1, 1), fc_layer(3), softmax_layer(["a", "b"]))
    )


def _alloc_state():
    return ProjectState(
        ProjectConfig(project_id="alloc", spec=_alloc_spec(), per_worker_cap=3000)
    )


def _register(state, count, prefix):
    labels = ("a", "b")
    state.register_dataset(
        [(f"{prefix}/{i:08d}", labels[i % 2]) for i in range(count)]
    )


def _settle(state):
    state.allocate_unallocated()
    state.rebalance()
    state.check_invariants()


def test_allocation_invariants_under_churn(capsys):
    # one worker against 60000 ids takes exactly its 3000 cap
    state = _alloc_state()
    _register(state, 60000, "d")
    state.add_worker("w00", "train", 3000)
    state.allocate_for_join("w00")
    _settle(state)
    assert len(state.workers["w00"].allocated_ids) == 3000
    assert len(state.unallocated) == 57000

    # twenty workers drain the pool completely, 3000 each
    state = _alloc_state()
    _register(state, 60000, "d")
    for k in range(20):
        name = f"w{k:02d}"
        state.add_worker(name, "train", 3000)
        state.allocate_for_join(name)
        _settle(state)
    sizes = sorted(len(w.allocated_ids) for w in state.workers.values())
    assert sizes == [3000] * 20
    assert len(state.unallocated) == 0

    # random join/leave/register churn keeps every invariant intact
    @given(
        ops=st.lists(
            st.one_of(
                st.tuples(st.just("register"), st.integers(1, 2000)),
                st.tuples(st.just("join"), st.integers(1, 3000)),
                st.tuples(st.just("lose"), st.integers(0, 10 ** 6)),
            ),
            min_size=1,
            max_size=12,
        )
    )
    @settings(max_examples=50, deadline=None)
    def churn(ops):
        state = _alloc_state()
        registered = 0
        batch = 0
        joined = 0
        for op, arg in ops:
            if op == "register":
                take = min(arg, 10000 - registered)
                if take <= 0:
                    continue
                _register(state, take, f"d{batch}")
                registered += take
                batch += 1
            elif op == "join":
                if joined >= 20:
                    continue
                name = f"w{joined:02d}"
                joined += 1
                state.add_worker(name, "train", arg)
                state.allocate_for_join(name)
            else:
                if not state.workers:
                    continue
                victim = sorted(state.workers)[arg % len(state.workers)]
                state.handle_worker_loss(victim)
            _settle(state)
            held = sum(len(w.allocated_ids) for w in state.workers.values())
            assert held + len(state.unallocated) == registered

    churn()
    report(
        capsys,
        "allocation-policy",
        True,
        "exact 3000/60000 and 20x3000 splits; 50 churn sequences hold all invariants",
    )


# ---------------------------------------------------------------------------
# protocol totality: fuzzed decoding never crashes, all failures are typed


def _valid_frames():
    spec = NetworkSpec((input_layer(3, 3, 1), fc_layer(3), softmax_layer(["a", "b"])))
    _, params, _ = build_network(spec, seed=2)
    msgs = [
        pm.Join("p", "w1", 1, worker_id="w1", mode="train", capacity=8),
        pm.Ping("p", "co", 2, sent_at_ms=123),
        pm.Pong("p", "w1", 3, sent_at_ms=124),
        pm.Bye("p", "co", 4, reason="done"),
        pm.AllocationUpdate("p", "co", 5, add_ids=["d/00000001"], remove_ids=[]),
        pm.WorkOrder("p", "co", 6, params=params, steps=5, deadline_hint_ms=900),
        pm.Welcome("p", "co", 7, spec=spec, hyper=Hyperparams(), params=params),
        pm.HyperUpdate("p", "co", 8, hyper=Hyperparams(learning_rate=0.5)),
        pm.StatsReport("p", "w1", 9, iteration=3, metric_name="test_error", value=0.5),
    ]
    return [pm.encode(m) for m in msgs]


def _jsonish(rng):
    def value(depth):
        k = int(rng.integers(0, 6 if depth < 2 else 4))
        if k == 0:
            return int(rng.integers(-(10 ** 6), 10 ** 6))
        if k == 1:
            return float(rng.standard_normal())
        if k == 2:
            return "".join(chr(int(rng.integers(32, 127))) for _ in range(int(rng.integers(0, 12))))
        if k == 3:
            return bool(rng.integers(0, 2))
        if k == 4:
            return [value(depth + 1) for _ in range(int(rng.integers(0, 4)))]
        return {f"k{j}": value(depth + 1) for j in range(int(rng.integers(0, 4)))}

    tags = [
        "join", "welcome", "work_order", "gradient_report", "stats_report",
        "hyper_update", "predict_request", "telemetry", "bye", "ping", "nope",
    ]
    if rng.integers(0, 2):
        # well-formed envelope, arbitrary body: stresses the field parsers
        return {
            "project_id": "p",
            "sender_id": "s",
            "msg_seq": int(rng.integers(0, 100)),
            "type": tags[int(rng.integers(0, len(tags)))],
            "body": value(0),
        }
    return value(0)


def test_message_decoding_survives_fuzzing(capsys):
    rng = np.random.default_rng(0xF00D)
    valid = _valid_frames()
    decoded = 0
    rejected = 0
    stream = framing.FrameDecoder()
    for i in range(10000):
        r = i % 10
        if r < 4:
            raw = rng.bytes(int(rng.integers(0, 301)))
        elif r < 7:
            raw = json.dumps(_jsonish(rng)).encode()
        else:
            flipped = bytearray(valid[int(rng.integers(0, len(valid)))])
            for _ in range(int(rng.integers(1, 9))):
                flipped[int(rng.integers(0, len(flipped)))] ^= int(rng.integers(1, 256))
            raw = bytes(flipped)

        try:
            pm.decode(raw)
            decoded += 1
        except pm.ProtocolError:
            rejected += 1
        # anything else propagates and fails the test

        try:
            if r < 2:
                stream.feed(framing.encode_frame(raw))
            else:
                stream.feed(raw)
        except framing.FrameError:
            stream = framing.FrameDecoder()

    report(
        capsys,
        "protocol-totality",
        decoded + rejected == 10000,
        f"10000 frames: {decoded} decoded, {rejected} rejected with typed errors, 0 crashes",
    )


# ---------------------------------------------------------------------------
# shared live cluster for the process-level criteria


@pytest.fixture(scope="module")
def cluster(tmp_path_factory):
    root = tmp_path_factory.mktemp("store")
    ds, ds_url = hz.start_datastore(root)
    co, co_url = hz.start_coordinator()
    hz.ingest_dataset(
        ds_url, "v400", bench_data.build_zip(bench_data.synth_vectors(400, seed=21))
    )
    hz.ingest_dataset(
        ds_url, "v90", bench_data.build_zip(bench_data.synth_vectors(90, seed=5))
    )
    yield {"ds_url": ds_url, "co_url": co_url}
    co.stop()
    ds.stop()


def _workers_by_id(status):
    return {w["worker_id"]: w for w in status["workers"]}


def _status(co_url, pid):
    r = httpx.get(f"{co_url}/projects/{pid}", timeout=10)
    r.raise_for_status()
    return r.json()


# ---------------------------------------------------------------------------
# distributed-equals-serial: replay the telemetry log against live training


DIST_HYPER = {"learning_rate": 0.01, "dropout_p": 0.1}


def _dist_reference_data(ds_url):
    """qid -> (label, array) exactly as the store hands items out.

    Ingest sorts entries by "{label}/{name}", so local triples sorted the
    same way line up with manifest ids; the manifest labels double-check it.
    """
    triples = sorted(
        bench_data.synth_vectors(400, seed=21), key=lambda t: f"{t[0]}/{t[1]}"
    )
    manifest = httpx.get(f"{ds_url}/datasets/v400/manifest", timeout=10).json()
    entries = sorted(manifest["entries"], key=lambda e: e["id"])
    assert [e["label"] for e in entries] == [label for label, _, _ in triples]
    return {
        f"v400/{i:08d}": (label, decode_item(blob, item=name))
        for i, (label, name, blob) in enumerate(triples)
    }


def test_distributed_training_matches_serial_replay(cluster, capsys):
    co, ds = cluster["co_url"], cluster["ds_url"]
    hz.create_project(co, {
        "project_id": "dist",
        "spec": hz.scaling_spec().to_obj(),
        "T_seconds": 1.0,
        "mode": "step_budget",
        "step_budget_steps": 100,
        "hyper": DIST_HYPER,
        "seed": 42,
    })
    hz.register_dataset(co, "dist", ds, "v400")

    # strictly sequential joins with capacity 100: the pool is carved in
    # sorted order, so w0..w3 hold the four contiguous quarters
    workers = []
    try:
        for k in range(4):
            name = f"w{k}"
            workers.append(hz.start_worker(co, "dist", name, ds, capacity=100))
            hz.poll_status(
                co, "dist",
                lambda s, n=name: _workers_by_id(s).get(n, {}).get("allocated") == 100,
                timeout=20,
            )

        full_target = 12
        seen = {"full": 0}

        def enough(record):
            if record["total_examples"] == 400:
                seen["full"] += 1
            return seen["full"] >= full_target

        hz.read_records(co, "dist", count=400, timeout=120, stop_when=enough)

        # freeze the run: paused workers empty the barrier and the loop idles
        for k in range(4):
            httpx.post(
                f"{co}/projects/dist/workers/w{k}/pause", timeout=10
            ).raise_for_status()
        settle_deadline = time.monotonic() + 30
        prev = _status(co, "dist")["iteration"]
        while True:
            time.sleep(2.5)
            cur = _status(co, "dist")["iteration"]
            if cur == prev:
                break
            prev = cur
            if time.monotonic() > settle_deadline:
                raise hz.HarnessError("loop did not settle after pausing all workers")

        snap = httpx.post(f"{co}/projects/dist/snapshot", timeout=30)
        snap.raise_for_status()
        archive = deserialize(snap.content)
        n = archive.iteration
        records = hz.read_records(co, "dist", count=n, timeout=30)
    finally:
        for w in workers:
            w.stop()

    assert archive.params.version == n
    full_folds = sum(1 for r in records if r["total_examples"] == 400)
    assert full_folds >= 10

    data = _dist_reference_data(ds)
    qids = sorted(data)
    chunks = {f"w{k}": qids[k * 100:(k + 1) * 100] for k in range(4)}
    hyper = Hyperparams(**DIST_HYPER)
    net, params, adagrad = build_network(hz.scaling_spec(), seed=42)

    for idx, record in enumerate(records):
        assert record["iteration"] == idx + 1
        folded = sorted(
            (w, s["example_count"])
            for w, s in record["workers"].items()
            if s["example_count"] > 0
        )
        total = sum(count for _, count in folded)
        assert total == record["total_examples"]
        if total > 0:
            acc = params.arrays.zeros_like()
            for worker_id, count in folded:
                # a partially cached worker still computes an ascending
                # prefix of its chunk, so the count pins the exact items
                items = [data[q] for q in chunks[worker_id][:count]]
                grads, n_done = serial_gradient_sum(
                    net, params, hyper, items, worker_id,
                    dropout_rng(worker_id, params.version),
                )
                assert n_done == count
                acc.add_(grads)
            avg = acc.scaled(1.0 / total)
            params, adagrad = adagrad_update(params, adagrad, avg, hyper)
        else:
            params = Params(params.version + 1, params.arrays)
        assert record["params_version"] == params.version

    worst = params.arrays.max_abs_diff(archive.params.arrays)
    report(
        capsys,
        "distributed-equals-serial",
        worst <= 1e-9,
        f"{n} iterations ({full_folds} full 4x100 folds), max param delta {worst:.3g}",
    )


# ---------------------------------------------------------------------------
# fault tolerance: SIGKILL one of three trainers mid-iteration


def test_training_survives_worker_loss(cluster, capsys):
    co, ds = cluster["co_url"], cluster["ds_url"]
    hz.create_project(co, {
        "project_id": "fault",
        "spec": hz.scaling_spec().to_obj(),
        "T_seconds": 1.0,
        "seed": 3,
    })
    hz.register_dataset(co, "fault", ds, "v90")
    names = ["w1", "w2", "w3"]
    workers = {n: hz.start_worker(co, "fault", n, ds) for n in names}
    try:
        hz.poll_status(
            co, "fault",
            lambda s: sorted(
                (w["allocated"], w["cache_ready"]) for w in s["workers"]
            ) == [(30, True)] * 3,
            timeout=30,
        )
        first = hz.read_records(co, "fault", count=1, timeout=30)
        kill_iter = first[0]["iteration"]

        time.sleep(0.45)  # land mid-window of iteration kill_iter+1
        workers["w2"].proc.send_signal(signal.SIGKILL)

        def recovered(s):
            ws = _workers_by_id(s)
            return (
                "w2" not in ws
                and sum(w["allocated"] for w in s["workers"]) + s["unallocated"] == 90
            )

        status = hz.poll_status(co, "fault", recovered, timeout=30)
        recovery_iter = status["iteration"]
        ws = _workers_by_id(status)
        assert sorted(w["allocated"] for w in ws.values()) == [45, 45]
        assert status["unallocated"] == 0

        records = hz.read_records(
            co, "fault", count=512, timeout=30,
            stop_when=lambda r: r["iteration"] >= kill_iter + 3,
        )
    finally:
        for w in workers.values():
            w.stop()

    after = [r for r in records if r["iteration"] > kill_iter]
    assert after, "loop stopped after the kill"
    for r in after:
        stats = r["workers"].get("w2")
        assert stats is None or stats["example_count"] == 0
    survivors_fold = [
        r for r in after
        if r["iteration"] >= kill_iter + 2 and r["total_examples"] > 0
    ]
    report(
        capsys,
        "fault-tolerance",
        recovery_iter <= kill_iter + 2 and bool(survivors_fold),
        f"killed at iteration {kill_iter}+, ids redistributed by {recovery_iter}, "
        f"45/45 split, no post-kill fold from the victim",
    )


# ---------------------------------------------------------------------------
# archive round-trip: snapshot mid-training, reload, identical predictions


def test_snapshot_round_trip_preserves_predictions(cluster, capsys):
    co, ds = cluster["co_url"], cluster["ds_url"]
    hz.create_project(co, {
        "project_id": "rt",
        "spec": hz.scaling_spec().to_obj(),
        "T_seconds": 1.0,
        "seed": 7,
    })
    hz.register_dataset(co, "rt", ds, "v90")
    workers = [hz.start_worker(co, "rt", f"w{k}", ds) for k in range(2)]
    try:
        hz.poll_status(co, "rt", hz._all_ready(2), timeout=30)
        hz.read_records(co, "rt", count=2, timeout=30)
        snap = httpx.post(f"{co}/projects/rt/snapshot", timeout=30)
        snap.raise_for_status()
        b1 = snap.content
    finally:
        for w in workers:
            w.stop()

    # document-level round trip is float-exact
    d1 = deserialize(b1)
    d2 = deserialize(serialize(d1))
    assert d1.iteration == d2.iteration and d1.seed == d2.seed
    for a, b in zip(d1.params.arrays.arrays(), d2.params.arrays.arrays()):
        assert np.array_equal(a, b)
    for a, b in zip(d1.adagrad.accumulators.arrays(), d2.adagrad.accumulators.arrays()):
        assert np.array_equal(a, b)

    # service-level round trip: load as a fresh project, snapshot again
    r = httpx.post(
        f"{co}/projects", params={"project_id": "rt-copy"}, content=b1,
        headers={"content-type": "application/json"}, timeout=30,
    )
    r.raise_for_status()
    b2 = httpx.post(f"{co}/projects/rt-copy/snapshot", timeout=30)
    b2.raise_for_status()
    bytes_equal = b2.content == b1

    net, _, _ = build_network(d1.spec, seed=d1.seed)
    assert net.labels == d1.labels
    rng = np.random.default_rng(77)
    mismatches = 0
    for _ in range(100):
        x = rng.random((12, 12, 1))
        live = httpx.post(
            f"{co}/projects/rt-copy/predict",
            json={"tensor": {"shape": [12, 12, 1], "values": x.ravel().tolist()}},
            timeout=10,
        ).json()
        label, probability = predict_label(net, d1.params, x)
        if live["label"] != label or live["probability"] != probability:
            mismatches += 1

    report(
        capsys,
        "archive-round-trip",
        bytes_equal and mismatches == 0,
        f"snapshot at iteration {d1.iteration}: bytes identical {bytes_equal}, "
        f"100 predictions, {mismatches} mismatches",
    )


# ---------------------------------------------------------------------------
# scaling: throughput must grow with worker count (needs real cores)


def test_throughput_scales_with_worker_count(tmp_path, capsys):
    cores = os.cpu_count() or 1
    if cores < 4:
        skip(capsys, "scaling", f"needs >= 4 cores, this machine has {cores}")
    rows, aborted = hz.run_scaling([1, 2, 4, 8], iterations=20, T=2.0, out_dir=tmp_path)
    assert not aborted, f"runs aborted for n={aborted}"
    powers = {n: power for n, power, _, _ in rows}
    increasing = all(
        powers[a] < powers[b] for a, b in zip([1, 2, 4], [2, 4, 8])
    )
    ratio = powers[4] / powers[1]
    report(
        capsys,
        "scaling",
        increasing and ratio >= 2.5,
        f"power {', '.join(f'{n}:{powers[n]:.0f}' for n in [1, 2, 4, 8])} ex/s, "
        f"4-worker speedup {ratio:.2f}x",
    )


# ---------------------------------------------------------------------------
# convergence: rendered-digit corpus, conv net, 4 trainers + 1 tracker


TRAIN_COUNT = 10000
TEST_COUNT = 1000
ERROR_TARGET = 0.20


@pytest.fixture(scope="module")
def digit_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("digits")
    train_dir = root / "train"
    test_dir = root / "test"
    bench_data.write_digit_corpus(train_dir, TRAIN_COUNT, seed=100)
    bench_data.write_digit_corpus(test_dir, TEST_COUNT, seed=200)
    return train_dir, test_dir


def _convergence_run(cluster, pid, seed, labels, test_dir):
    """Train until test error crosses the target; returns sampled errors."""
    co, ds = cluster["co_url"], cluster["ds_url"]
    hz.create_project(co, {
        "project_id": pid,
        "spec": hz.digits_spec(labels).to_obj(),
        "T_seconds": 2.0,
        "hyper": {"learning_rate": 0.05},
        "seed": seed,
    })
    hz.register_dataset(co, pid, ds, "digits")
    workers = [hz.start_worker(co, pid, "track0", mode="track", test_dir=str(test_dir))]
    workers += [hz.start_worker(co, pid, f"w{k}", ds) for k in range(4)]
    try:
        hz.poll_status(co, pid, hz._all_ready(4), timeout=60)
        records = hz.read_records(
            co, pid, count=100, timeout=420,
            stop_when=lambda r: r.get("metrics", {}).get("test_error", 1.0) < ERROR_TARGET,
        )
    finally:
        for w in workers:
            w.stop()
    return [
        r["metrics"]["test_error"] for r in records if "test_error" in r.get("metrics", {})
    ]


def test_digit_classification_converges(cluster, digit_corpus, capsys):
    train_dir, test_dir = digit_corpus
    ds = cluster["ds_url"]
    hz.ingest_dataset(ds, "digits", bench_data.zip_labeled_dir(train_dir))
    manifest = httpx.get(f"{ds}/datasets/digits/manifest", timeout=30).json()
    labels = manifest["label_set"]
    assert len(labels) == 10

    outcomes = []
    for seed in (0, 1, 2):
        errors = _convergence_run(cluster, f"conv-{seed}", seed, labels, test_dir)
        assert errors, f"seed {seed}: tracker produced no error samples"
        assert errors[0] > 0.7, f"seed {seed}: starts at {errors[0]:.2f}, not untrained"
        outcomes.append((seed, errors[0], min(errors)))
        passes = sum(1 for _, _, best in outcomes if best < ERROR_TARGET)
        fails = len(outcomes) - passes
        if passes >= 2 or fails >= 2:
            break

    passes = sum(1 for _, _, best in outcomes if best < ERROR_TARGET)
    detail = "; ".join(
        f"seed {s}: {first:.2f} -> {best:.3f}" for s, first, best in outcomes
    )
    report(
        capsys,
        "convergence",
        passes >= 2,
        f"{passes}/{len(outcomes)} runs under {ERROR_TARGET} ({detail})",
    )
